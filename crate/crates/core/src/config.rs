//! Flat JSON run configuration shared by every CLI command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::envs::{DemoConfig, Env};
use crate::error::{Error, Result};
use crate::eval::{Approach, EvalConfig};
use crate::latent::{LatentConfig, LatentFamily, TemperatureSchedule};
use crate::model::{ArchConfig, TrainConfig};

/// Every key is required in a config file, so the file alone determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: String,
    pub approach: Approach,
    /// Categories, or latent dimension for Gaussian approaches.
    pub k: usize,
    pub tau_initial: f64,
    pub tau_min: f64,
    pub tau_rate: f64,
    pub straight_through: bool,
    pub hidden: usize,
    pub attention_dim: usize,
    pub policy_hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kl_weight: f64,
    pub eval_every: u64,
    pub per_behavior: usize,
    pub noise_std: f64,
    pub max_retries: usize,
    pub eval_episodes: usize,
    pub threshold: f64,
    pub k_list: Vec<usize>,
    /// Demonstration file; defaults to `<out_dir>/demos.jsonl` when null.
    pub dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
}

/// The desk-scale recipe: a narrower encoder, a lighter KL weight and
/// longer training than the library defaults.
impl Default for RunConfig {
    fn default() -> Self {
        let t = TemperatureSchedule::default();
        let arch = ArchConfig::default();
        let train = TrainConfig::default();
        let demos = DemoConfig::default();
        Self {
            env: "reach".into(),
            approach: Approach::Categorical,
            k: 4,
            tau_initial: t.initial,
            tau_min: t.min,
            tau_rate: t.rate,
            straight_through: true,
            hidden: 16,
            attention_dim: 16,
            policy_hidden: arch.policy_hidden,
            epochs: 80,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            kl_weight: 0.5,
            eval_every: train.eval_every,
            per_behavior: demos.per_behavior,
            noise_std: demos.noise_std,
            max_retries: demos.max_retries,
            eval_episodes: EvalConfig::default().episodes,
            threshold: 0.0,
            k_list: vec![2, 4, 6],
            dataset: None,
            out_dir: PathBuf::from("runs"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        Env::from_name(&self.env)?;
        if self.k < 2 {
            return Err(Error::Config(format!("k must be >= 2, got {}", self.k)));
        }
        if self.k_list.iter().any(|&k| k < 2) {
            return Err(Error::Config("every k in k_list must be >= 2".into()));
        }
        if self.per_behavior == 0 || self.eval_episodes == 0 {
            return Err(Error::Config("per_behavior and eval_episodes must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        self.train_config().validate()
    }

    pub fn env(&self) -> Result<Env> {
        Env::from_name(&self.env)
    }

    pub fn latent(&self) -> LatentConfig {
        LatentConfig {
            family: match self.approach {
                Approach::GaussianPrior | Approach::GaussianEncoded => LatentFamily::Gaussian,
                _ => LatentFamily::Categorical,
            },
            k: self.k,
            temperature: TemperatureSchedule {
                initial: self.tau_initial,
                min: self.tau_min,
                rate: self.tau_rate,
            },
            straight_through: self.straight_through,
        }
    }

    /// Training settings for `approach` with the configured hyperparameters.
    pub fn train_config(&self) -> TrainConfig {
        let base = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            kl_weight: self.kl_weight,
            seed: self.seed,
            latent: LatentConfig {
                family: LatentFamily::Categorical,
                ..self.latent()
            },
            arch: ArchConfig {
                hidden: self.hidden,
                attention_dim: self.attention_dim,
                policy_hidden: self.policy_hidden.clone(),
            },
            objective: crate::model::Objective::Cvae,
            eval_every: self.eval_every,
        };
        self.approach.train_config(&base)
    }

    pub fn demo_config(&self) -> DemoConfig {
        DemoConfig {
            per_behavior: self.per_behavior,
            noise_std: self.noise_std,
            seed: self.seed,
            max_retries: self.max_retries,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            episodes: self.eval_episodes,
            seed: self.seed,
        }
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset
            .clone()
            .unwrap_or_else(|| self.out_dir.join("demos.jsonl"))
    }

    /// The effective config as embedded in artifacts.
    pub fn echo(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

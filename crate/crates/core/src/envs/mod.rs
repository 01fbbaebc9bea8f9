//! Synthetic tasks with scripted experts, demonstration generation and
//! policy rollouts.

mod dataset;
pub mod reach;
pub mod speed;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use dataset::{read_dataset, read_dataset_file, write_dataset, write_dataset_file, Dataset};
pub use reach::{ReachState, ReachTask};
pub use speed::{SpeedState, SpeedTask};

use crate::error::{Error, Result};
use crate::model::{mix_seed, policy_action, ModelParams, Trajectory};
use crate::tensor::Tensor;

pub(crate) fn clip(v: f64, bound: f64) -> f64 {
    v.clamp(-bound, bound)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub horizon: usize,
    pub dt: f64,
    pub action_clip: f64,
    /// Reach success radius; unused by the speed task.
    pub success_radius: f64,
}

impl EpisodeConfig {
    pub fn reach() -> Self {
        Self {
            horizon: 50,
            dt: 0.05,
            action_clip: 1.0,
            success_radius: 0.05,
        }
    }

    pub fn speed() -> Self {
        Self {
            horizon: 100,
            ..Self::reach()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || !(self.dt > 0.0) || !(self.success_radius > 0.0) || !(self.action_clip > 0.0) {
            return Err(Error::Config(format!("invalid episode config {self:?}")));
        }
        Ok(())
    }
}

/// What an episode achieved.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Outcome {
    /// Index of the target the agent ended on, if any.
    Reach(Option<usize>),
    /// Mean velocity over the second half of the episode.
    Speed(f64),
}

pub trait Task: Sync {
    type State: Clone;

    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn behaviors(&self) -> usize;
    fn episode(&self) -> &EpisodeConfig;
    fn reset(&self, rng: &mut ChaCha8Rng) -> Self::State;
    fn step(&self, s: &Self::State, a: &[f64]) -> Self::State;
    fn expert(&self, s: &Self::State, behavior: usize) -> Vec<f64>;
    fn observe(&self, s: &Self::State) -> Vec<f64>;
    /// Summarises the post-action states of one episode.
    fn outcome(&self, visited: &[Self::State]) -> Outcome;
    /// Whether a demonstration of `behavior` with this outcome is usable.
    fn accepts(&self, outcome: &Outcome, behavior: usize) -> bool;
}

/// Something that picks actions during a rollout.
pub enum EnvPolicy<'a> {
    Expert(usize),
    Zero,
    /// Learned decoder conditioned on a fixed latent vector.
    Model {
        params: &'a ModelParams,
        z: Vec<f64>,
    },
    Custom(Box<dyn FnMut(&[f64]) -> Result<Vec<f64>> + 'a>),
}

impl EnvPolicy<'_> {
    fn action<T: Task>(&mut self, task: &T, s: &T::State, obs: &[f64]) -> Result<Vec<f64>> {
        match self {
            EnvPolicy::Expert(b) => Ok(task.expert(s, *b)),
            EnvPolicy::Zero => Ok(vec![0.0; task.action_dim()]),
            EnvPolicy::Model { params, z } => policy_action(params, obs, z),
            EnvPolicy::Custom(f) => f(obs),
        }
    }
}

fn run_episode<T: Task>(
    task: &T,
    start: &T::State,
    policy: &mut EnvPolicy<'_>,
    mut noise: Option<(Normal<f64>, &mut ChaCha8Rng)>,
) -> Result<(Trajectory, Outcome)> {
    let ep = task.episode();
    let mut s = start.clone();
    let mut states = Vec::with_capacity(ep.horizon);
    let mut actions = Vec::with_capacity(ep.horizon);
    let mut visited = Vec::with_capacity(ep.horizon);
    for _ in 0..ep.horizon {
        let obs = task.observe(&s);
        let mut a = policy.action(task, &s, &obs)?;
        if a.len() != task.action_dim() || a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy action"));
        }
        if let Some((dist, rng)) = noise.as_mut() {
            for v in &mut a {
                *v += dist.sample(*rng);
            }
        }
        for v in &mut a {
            *v = clip(*v, ep.action_clip);
        }
        s = task.step(&s, &a);
        states.push(obs);
        actions.push(a);
        visited.push(s.clone());
    }
    let outcome = task.outcome(&visited);
    Ok((Trajectory::from_rows(&states, &actions, None)?, outcome))
}

/// Deterministic rollout of `policy` for one horizon from `start`.
pub fn rollout<T: Task>(task: &T, start: &T::State, policy: &mut EnvPolicy<'_>) -> Result<(Trajectory, Outcome)> {
    run_episode(task, start, policy, None)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub per_behavior: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub max_retries: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            per_behavior: 600,
            noise_std: 0.05,
            seed: 0,
            max_retries: 10,
        }
    }
}

fn episode_seed(seed: u64, behavior: usize, index: usize, attempt: usize) -> u64 {
    mix_seed(
        mix_seed(seed, behavior as u64),
        ((index as u64) << 8) | attempt as u64,
    )
}

/// Label-balanced, shuffled expert demonstrations with Gaussian action noise.
pub fn generate_demos<T: Task>(task: &T, config: &DemoConfig) -> Result<Vec<Trajectory>> {
    if config.per_behavior == 0 {
        return Err(Error::Config("per_behavior must be >= 1".into()));
    }
    task.episode().validate()?;
    let dist = Normal::new(0.0, config.noise_std)
        .map_err(|e| Error::Config(format!("noise_std: {e}")))?;

    let mut out = Vec::with_capacity(task.behaviors() * config.per_behavior);
    for b in 0..task.behaviors() {
        for i in 0..config.per_behavior {
            let mut accepted = None;
            for attempt in 0..=config.max_retries {
                let ep_seed = episode_seed(config.seed, b, i, attempt);
                let mut rng = ChaCha8Rng::seed_from_u64(ep_seed);
                let start = task.reset(&mut rng);
                let (mut traj, outcome) =
                    run_episode(task, &start, &mut EnvPolicy::Expert(b), Some((dist, &mut rng)))?;
                if task.accepts(&outcome, b) {
                    traj.label = Some(b);
                    traj.seed = Some(ep_seed);
                    accepted = Some(traj);
                    break;
                }
            }
            out.push(accepted.ok_or(Error::ExpertFailure {
                behavior: b,
                retries: config.max_retries,
            })?);
        }
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x5348_5546)));
    Ok(out)
}

/// Task selector used by configs and the CLI.
#[derive(Clone, Debug, PartialEq)]
pub enum Env {
    Reach(ReachTask),
    Speed(SpeedTask),
}

impl Env {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "reach" => Ok(Env::Reach(ReachTask::default())),
            "speed" => Ok(Env::Speed(SpeedTask::default())),
            other => Err(Error::Config(format!("unknown env {other:?} (expected reach | speed)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Env::Reach(t) => t.name(),
            Env::Speed(t) => t.name(),
        }
    }

    pub fn behaviors(&self) -> usize {
        match self {
            Env::Reach(t) => t.behaviors(),
            Env::Speed(t) => t.behaviors(),
        }
    }

    pub fn generate_demos(&self, config: &DemoConfig) -> Result<Vec<Trajectory>> {
        match self {
            Env::Reach(t) => generate_demos(t, config),
            Env::Speed(t) => generate_demos(t, config),
        }
    }
}

/// A one-hot vector as plain values.
pub fn one_hot(k: usize, i: usize) -> Vec<f64> {
    Tensor::one_hot(k, i).into_data()
}

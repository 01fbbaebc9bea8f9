//! The conditional VAE: a bi-LSTM + attention trajectory encoder, a
//! latent-conditioned MLP policy as decoder, the variational objective, the
//! plain behavior-cloning objective used by the baselines, and training.

use std::f64::consts::PI;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::latent::{
    self, anneal_temperature, kl_categorical_uniform, LatentConfig, LatentFamily,
};
use crate::nn::{
    attention_pool, bilstm_encode, policy_forward, policy_forward_rows, Attention,
    AttentionParams, Dense, DenseParams, Lstm, LstmParams, Policy, PolicyParams,
};
use crate::optim::{adam_step, AdamConfig, OptimizerState};
use crate::tensor::Tensor;

/// One demonstration: aligned states and actions.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `[T×state_dim]`
    pub states: Tensor,
    /// `[T×action_dim]`
    pub actions: Tensor,
    /// Ground-truth behavior. Only the labelled baseline and evaluation read it.
    pub label: Option<usize>,
    /// Episode seed the demonstration was generated from, if known.
    pub seed: Option<u64>,
}

impl Trajectory {
    pub fn new(states: Tensor, actions: Tensor, label: Option<usize>) -> Result<Self> {
        if states.rank() != 2 || actions.rank() != 2 || states.shape()[0] != actions.shape()[0] {
            return Err(Error::shape("Trajectory", states.shape(), actions.shape()));
        }
        if !states.is_finite() || !actions.is_finite() {
            return Err(Error::NonFinite("Trajectory"));
        }
        Ok(Self {
            states,
            actions,
            label,
            seed: None,
        })
    }

    pub fn from_rows(states: &[Vec<f64>], actions: &[Vec<f64>], label: Option<usize>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::Contract("trajectory must have at least one step".into()));
        }
        Self::new(Tensor::from_rows(states)?, Tensor::from_rows(actions)?, label)
    }

    pub fn len(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.states.shape()[1]
    }

    pub fn action_dim(&self) -> usize {
        self.actions.shape()[1]
    }

    /// Per-step encoder inputs `[s_t, a_t]`.
    pub fn step_inputs(&self) -> Vec<Tensor> {
        (0..self.len())
            .map(|t| {
                let mut v = self.states.row(t).to_vec();
                v.extend_from_slice(self.actions.row(t));
                Tensor::vector(v)
            })
            .collect()
    }
}

/// Layer widths other than those fixed by the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// LSTM hidden width per direction.
    pub hidden: usize,
    pub attention_dim: usize,
    pub policy_hidden: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            attention_dim: 64,
            policy_hidden: vec![64, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub state_dim: usize,
    pub action_dim: usize,
    pub family: LatentFamily,
    /// Categories, or latent dimension for the Gaussian family.
    pub latent_dim: usize,
    pub arch: ArchConfig,
}

impl ModelDims {
    pub fn new(state_dim: usize, action_dim: usize, latent: &LatentConfig, arch: ArchConfig) -> Self {
        Self {
            state_dim,
            action_dim,
            family: latent.family,
            latent_dim: latent.k,
            arch,
        }
    }

    fn head_width(&self) -> usize {
        match self.family {
            LatentFamily::Categorical => self.latent_dim,
            LatentFamily::Gaussian => 2 * self.latent_dim,
        }
    }

    fn policy_widths(&self) -> Vec<usize> {
        let mut w = vec![self.state_dim + self.latent_dim];
        w.extend_from_slice(&self.arch.policy_hidden);
        w.push(self.action_dim);
        w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub attention: AttentionParams,
    /// Posterior head: `k` logits, or mean and log-variance for Gaussian.
    pub head: DenseParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub encoder: EncoderParams,
    pub decoder: PolicyParams,
}

/// A [`ModelParams`] bound to a tape.
pub struct BoundModel {
    pub forward: Lstm,
    pub backward: Lstm,
    pub attention: Attention,
    pub head: Dense,
    pub decoder: Policy,
}

impl BoundModel {
    /// Rebuilds the handles from parameter vars given in binding order.
    pub fn from_vars(dims: &ModelDims, vars: &[Var]) -> Result<Self> {
        let layers = dims.arch.policy_hidden.len() + 1;
        let want = 9 + 2 * layers;
        if vars.len() != want {
            return Err(Error::Contract(format!("expected {want} parameter vars, got {}", vars.len())));
        }
        let input_dim = dims.state_dim + dims.action_dim;
        let hidden = dims.arch.hidden;
        let lstm = |i: usize| Lstm {
            weight: vars[i],
            bias: vars[i + 1],
            input_dim,
            hidden,
        };
        let dense = |i: usize| Dense {
            weight: vars[i],
            bias: vars[i + 1],
        };
        Ok(Self {
            forward: lstm(0),
            backward: lstm(2),
            attention: Attention {
                projection: dense(4),
                query: vars[6],
            },
            head: dense(7),
            decoder: Policy {
                layers: (0..layers).map(|l| dense(9 + 2 * l)).collect(),
            },
        })
    }
}

impl ModelParams {
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = dims.state_dim + dims.action_dim;
        let a = &dims.arch;
        let encoder = EncoderParams {
            forward: LstmParams::init(&mut rng, input, a.hidden),
            backward: LstmParams::init(&mut rng, input, a.hidden),
            attention: AttentionParams::init(&mut rng, a.hidden, a.attention_dim),
            head: DenseParams::init(&mut rng, a.hidden, dims.head_width()),
        };
        let decoder = PolicyParams::init(&mut rng, &dims.policy_widths());
        Self { dims, encoder, decoder }
    }

    pub fn zeros(dims: ModelDims) -> Self {
        let input = dims.state_dim + dims.action_dim;
        let a = &dims.arch;
        let encoder = EncoderParams {
            forward: LstmParams::zeros(input, a.hidden),
            backward: LstmParams::zeros(input, a.hidden),
            attention: AttentionParams::zeros(a.hidden, a.attention_dim),
            head: DenseParams::zeros(a.hidden, dims.head_width()),
        };
        let decoder = PolicyParams::zeros(&dims.policy_widths());
        Self { dims, encoder, decoder }
    }

    /// Parameter names in binding order.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for dir in ["forward", "backward"] {
            names.push(format!("encoder.{dir}.weight"));
            names.push(format!("encoder.{dir}.bias"));
        }
        names.extend(
            ["projection.weight", "projection.bias", "query"]
                .map(|n| format!("encoder.attention.{n}")),
        );
        names.push("encoder.head.weight".into());
        names.push("encoder.head.bias".into());
        for i in 0..self.decoder.layers.len() {
            names.push(format!("decoder.{i}.weight"));
            names.push(format!("decoder.{i}.bias"));
        }
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let e = &self.encoder;
        let mut v = e.forward.tensors();
        v.extend(e.backward.tensors());
        v.extend(e.attention.tensors());
        v.extend(e.head.tensors());
        v.extend(self.decoder.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let e = &mut self.encoder;
        let mut v = e.forward.tensors_mut();
        v.extend(e.backward.tensors_mut());
        v.extend(e.attention.tensors_mut());
        v.extend(e.head.tensors_mut());
        v.extend(self.decoder.tensors_mut());
        v
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.names().into_iter().zip(self.tensors()).collect()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> BoundModel {
        BoundModel {
            forward: self.encoder.forward.bind(tape),
            backward: self.encoder.backward.bind(tape),
            attention: self.encoder.attention.bind(tape),
            head: self.encoder.head.bind(tape),
            decoder: self.decoder.bind(tape),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Posterior handles on a tape.
#[derive(Clone, Copy, Debug)]
pub enum Posterior {
    Categorical { probs: Var },
    Gaussian { mean: Var, logvar: Var },
}

/// Posterior values for one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub enum PosteriorValue {
    Categorical(Tensor),
    Gaussian { mean: Tensor, logvar: Tensor },
}

impl PosteriorValue {
    /// Class probabilities, or the posterior mean for the Gaussian family.
    pub fn point(&self) -> &Tensor {
        match self {
            PosteriorValue::Categorical(p) => p,
            PosteriorValue::Gaussian { mean, .. } => mean,
        }
    }
}

fn check_dims(traj: &Trajectory, dims: &ModelDims) -> Result<()> {
    if traj.state_dim() != dims.state_dim || traj.action_dim() != dims.action_dim {
        return Err(Error::shape(
            "trajectory vs model",
            &[traj.state_dim(), traj.action_dim()],
            &[dims.state_dim, dims.action_dim],
        ));
    }
    Ok(())
}

/// Records the encoder on `tape`: bi-LSTM, attention pooling, posterior head.
pub fn encode_on_tape(
    tape: &mut Tape<'_>,
    model: &BoundModel,
    family: LatentFamily,
    traj: &Trajectory,
) -> Result<Posterior> {
    if traj.is_empty() {
        return Err(Error::Contract("cannot encode an empty trajectory".into()));
    }
    let inputs: Vec<Var> = traj
        .step_inputs()
        .into_iter()
        .map(|x| tape.constant(x))
        .collect();
    let hs = bilstm_encode(tape, &inputs, &model.forward, &model.backward)?;
    let (r, _alpha) = attention_pool(tape, &hs, &model.attention)?;
    let out = model.head.forward(tape, r)?;
    Ok(match family {
        LatentFamily::Categorical => Posterior::Categorical {
            probs: tape.softmax(out)?,
        },
        LatentFamily::Gaussian => {
            let d = tape.value(out).len() / 2;
            Posterior::Gaussian {
                mean: tape.slice(out, 0, d)?,
                logvar: tape.slice(out, d, d)?,
            }
        }
    })
}

/// Approximate posterior for `traj`.
pub fn encode(traj: &Trajectory, params: &ModelParams) -> Result<PosteriorValue> {
    check_dims(traj, &params.dims)?;
    let mut tape = Tape::new();
    let model = params.bind(&mut tape);
    Ok(match encode_on_tape(&mut tape, &model, params.dims.family, traj)? {
        Posterior::Categorical { probs } => PosteriorValue::Categorical(tape.value(probs).clone()),
        Posterior::Gaussian { mean, logvar } => PosteriorValue::Gaussian {
            mean: tape.value(mean).clone(),
            logvar: tape.value(logvar).clone(),
        },
    })
}

/// Pre-drawn noise for one latent sample.
#[derive(Clone, Debug, PartialEq)]
pub enum LatentNoise {
    Gumbel(Tensor),
    Gaussian(Tensor),
}

impl LatentNoise {
    pub fn draw(family: LatentFamily, k: usize, rng: &mut impl rand::Rng) -> Self {
        match family {
            LatentFamily::Categorical => LatentNoise::Gumbel(latent::sample_gumbel(rng, k)),
            LatentFamily::Gaussian => LatentNoise::Gaussian(latent::sample_standard_normal(rng, k)),
        }
    }
}

/// Knobs for a single evaluation of the variational objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub kl_weight: f64,
    pub tau: f64,
    pub straight_through: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kl_weight: 1.0,
            tau: 1.0,
            straight_through: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

/// `−Σ_t log N(a_t; μ(s_t, z), I)` including the `½ log 2π` constants.
pub fn reconstruction_on_tape(
    tape: &mut Tape<'_>,
    decoder: &Policy,
    traj: &Trajectory,
    z: Var,
) -> Result<Var> {
    let states = tape.constant(traj.states.clone());
    let actions = tape.constant(traj.actions.clone());
    let mean = policy_forward_rows(tape, states, z, decoder)?;
    let diff = tape.sub(mean, actions)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    let half = tape.scale(total, 0.5)?;
    let constant = 0.5 * (traj.len() * traj.action_dim()) as f64 * (2.0 * PI).ln();
    tape.shift(half, constant)
}

/// Scalar handles for the pieces of the variational objective.
pub struct ElboVars {
    pub loss: Var,
    pub recon: Var,
    pub kl: Var,
    pub z: Var,
}

pub fn elbo_on_tape(
    tape: &mut Tape<'_>,
    model: &BoundModel,
    dims: &ModelDims,
    traj: &Trajectory,
    cfg: &LossConfig,
    noise: &LatentNoise,
) -> Result<ElboVars> {
    let posterior = encode_on_tape(tape, model, dims.family, traj)?;
    let (z, kl) = match (posterior, noise) {
        (Posterior::Categorical { probs }, LatentNoise::Gumbel(g)) => {
            let relaxed = latent::gumbel_softmax(tape, probs, g, cfg.tau)?;
            let z = if cfg.straight_through {
                latent::straight_through(tape, relaxed)?
            } else {
                relaxed
            };
            (z, kl_categorical_uniform(tape, probs)?)
        }
        (Posterior::Gaussian { mean, logvar }, LatentNoise::Gaussian(eps)) => {
            latent::gaussian_latent(tape, mean, logvar, eps)?
        }
        _ => return Err(Error::Contract("noise kind does not match latent family".into())),
    };
    let recon = reconstruction_on_tape(tape, &model.decoder, traj, z)?;
    let weighted = tape.scale(kl, cfg.kl_weight)?;
    let loss = tape.add(recon, weighted)?;
    Ok(ElboVars { loss, recon, kl, z })
}

fn parts(tape: &Tape<'_>, loss: Var, recon: Var, kl: Option<Var>) -> LossParts {
    LossParts {
        loss: tape.value(loss).item(),
        recon: tape.value(recon).item(),
        kl: kl.map_or(0.0, |k| tape.value(k).item()),
    }
}

/// Negative variational lower bound for one trajectory: `recon + β·kl`.
pub fn elbo_loss(
    traj: &Trajectory,
    params: &ModelParams,
    cfg: &LossConfig,
    noise: &LatentNoise,
) -> Result<LossParts> {
    check_dims(traj, &params.dims)?;
    let mut tape = Tape::new();
    let model = params.bind(&mut tape);
    let v = elbo_on_tape(&mut tape, &model, &params.dims, traj, cfg, noise)?;
    Ok(parts(&tape, v.loss, v.recon, Some(v.kl)))
}

/// [`elbo_loss`] plus gradients for every parameter in binding order.
pub fn elbo_loss_and_grad(
    traj: &Trajectory,
    params: &ModelParams,
    cfg: &LossConfig,
    noise: &LatentNoise,
) -> Result<(LossParts, Vec<Tensor>)> {
    check_dims(traj, &params.dims)?;
    let mut tape = Tape::new();
    let model = params.bind(&mut tape);
    let v = elbo_on_tape(&mut tape, &model, &params.dims, traj, cfg, noise)?;
    let grads = tape.backward(v.loss)?.params();
    Ok((parts(&tape, v.loss, v.recon, Some(v.kl)), grads))
}

fn bc_conditioning(dims: &ModelDims, label: Option<usize>) -> Result<Tensor> {
    match label {
        None => Ok(Tensor::zeros(&[dims.latent_dim])),
        Some(l) if l < dims.latent_dim => Ok(Tensor::one_hot(dims.latent_dim, l)),
        Some(l) => Err(Error::Contract(format!(
            "label {l} out of range for {} categories",
            dims.latent_dim
        ))),
    }
}

/// Behavior-cloning negative log-likelihood. `label = None` feeds a zero
/// vector in place of the latent; `Some(b)` feeds the one-hot of `b`.
pub fn bc_loss(traj: &Trajectory, params: &ModelParams, label: Option<usize>) -> Result<f64> {
    Ok(bc_loss_and_grad(traj, params, label)?.0.loss)
}

pub fn bc_loss_and_grad(
    traj: &Trajectory,
    params: &ModelParams,
    label: Option<usize>,
) -> Result<(LossParts, Vec<Tensor>)> {
    check_dims(traj, &params.dims)?;
    let cond = bc_conditioning(&params.dims, label)?;
    let mut tape = Tape::new();
    let model = params.bind(&mut tape);
    let z = tape.constant(cond);
    let recon = reconstruction_on_tape(&mut tape, &model.decoder, traj, z)?;
    let grads = tape.backward(recon)?.params();
    Ok((parts(&tape, recon, recon, None), grads))
}

/// Deterministic policy mean for state `s` under an arbitrary latent vector.
pub fn policy_action(params: &ModelParams, s: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let policy = params.decoder.bind(&mut tape);
    let s = tape.constant(Tensor::vector(s.to_vec()));
    let z = tape.constant(Tensor::vector(z.to_vec()));
    let a = policy_forward(&mut tape, s, z, &policy)?;
    Ok(tape.value(a).data().to_vec())
}

/// Deterministic action for state `s` under category `z` (must be one-hot).
pub fn act(s: &[f64], z: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    let ones = z.iter().filter(|&&v| v == 1.0).count();
    let zeros = z.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != z.len() {
        return Err(Error::Contract(format!("latent must be one-hot, got {z:?}")));
    }
    policy_action(params, s, z)
}

/// Which objective [`Trainer`] optimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Variational objective with the configured latent family.
    Cvae,
    /// Behavior cloning with a zero latent.
    BcNoLabel,
    /// Behavior cloning conditioned on the ground-truth one-hot label.
    BcLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kl_weight: f64,
    pub seed: u64,
    pub latent: LatentConfig,
    pub arch: ArchConfig,
    pub objective: Objective,
    /// Steps between checkpoint callbacks; 0 disables them.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            kl_weight: 1.0,
            seed: 0,
            latent: LatentConfig::categorical(4),
            arch: ArchConfig::default(),
            objective: Objective::Cvae,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.latent.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("kl_weight must be >= 0".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        if self.objective != Objective::Cvae && self.latent.family != LatentFamily::Categorical {
            return Err(Error::Config("behavior cloning uses a categorical conditioning vector".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub tau: f64,
    pub wall_ms: u64,
}

/// splitmix64 finaliser, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mini-batch Adam training over a fixed dataset.
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub log: Vec<LogRecord>,
}

impl Trainer {
    /// Fresh parameters sized for `dataset`.
    pub fn new(dataset: &[Trajectory], config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let first = dataset
            .first()
            .ok_or_else(|| Error::Contract("training dataset is empty".into()))?;
        let dims = ModelDims::new(
            first.state_dim(),
            first.action_dim(),
            &config.latent,
            config.arch.clone(),
        );
        let params = ModelParams::init(dims, mix_seed(config.seed, 0x1417));
        Ok(Self::resume(params, None, config))
    }

    /// Continues from existing parameters and, if given, optimizer state.
    pub fn resume(params: ModelParams, optimizer: Option<OptimizerState>, config: TrainConfig) -> Self {
        let optimizer =
            optimizer.unwrap_or_else(|| OptimizerState::new(config.adam(), params.tensors()));
        Self {
            config,
            params,
            optimizer,
            log: Vec::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    fn example_grad(&self, traj: &Trajectory, index: usize, epoch_seed: u64, tau: f64) -> Result<(LossParts, Vec<Tensor>)> {
        let dims = &self.params.dims;
        match self.config.objective {
            Objective::Cvae => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(epoch_seed, index as u64));
                let noise = LatentNoise::draw(dims.family, dims.latent_dim, &mut rng);
                let cfg = LossConfig {
                    kl_weight: self.config.kl_weight,
                    tau,
                    straight_through: self.config.latent.straight_through,
                };
                elbo_loss_and_grad(traj, &self.params, &cfg, &noise)
            }
            Objective::BcNoLabel => bc_loss_and_grad(traj, &self.params, None),
            Objective::BcLabel => {
                let label = traj.label.ok_or_else(|| {
                    Error::Contract(format!("trajectory {index} has no label for labelled BC"))
                })?;
                bc_loss_and_grad(traj, &self.params, Some(label))
            }
        }
    }

    fn batch_grads(
        &self,
        dataset: &[Trajectory],
        batch: &[usize],
        epoch_seed: u64,
        tau: f64,
    ) -> Vec<Result<(LossParts, Vec<Tensor>)>> {
        let run = |&i: &usize| self.example_grad(&dataset[i], i, epoch_seed, tau);
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            batch.par_iter().map(run).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            batch.iter().map(run).collect()
        }
    }

    /// Runs `config.epochs` epochs. `on_checkpoint` fires every `eval_every`
    /// steps.
    pub fn run(
        &mut self,
        dataset: &[Trajectory],
        mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        if dataset.is_empty() {
            return Err(Error::Contract("training dataset is empty".into()));
        }
        let started = Instant::now();
        for _ in 0..self.config.epochs {
            let epoch_seed = mix_seed(self.config.seed, self.step());
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));

            for batch in order.chunks(self.config.batch_size) {
                let tau = anneal_temperature(&self.config.latent.temperature, self.step());
                let results = self.batch_grads(dataset, batch, epoch_seed, tau);

                let mut sum: Option<Vec<Tensor>> = None;
                let mut totals = LossParts::default();
                for (&i, res) in batch.iter().zip(results) {
                    let (p, g) = match res {
                        Ok(ok) if ok.0.loss.is_finite() => ok,
                        Ok(_) | Err(Error::NonFinite(_)) => {
                            return Err(Error::Diverged {
                                step: self.step(),
                                trajectory: i,
                                last_good: Box::new(self.params.clone()),
                            })
                        }
                        Err(e) => return Err(e),
                    };
                    totals.loss += p.loss;
                    totals.recon += p.recon;
                    totals.kl += p.kl;
                    match &mut sum {
                        None => sum = Some(g),
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                    }
                }
                let n = batch.len() as f64;
                let mut grads = sum.expect("non-empty batch");
                grads.iter_mut().for_each(|g| g.scale_assign(1.0 / n));

                let mut params = self.params.tensors_mut();
                adam_step(&mut params, &grads, &mut self.optimizer)?;

                self.log.push(LogRecord {
                    step: self.step(),
                    loss: totals.loss / n,
                    recon: totals.recon / n,
                    kl: totals.kl / n,
                    tau,
                    wall_ms: started.elapsed().as_millis() as u64,
                });

                if self.config.eval_every > 0 && self.step() % self.config.eval_every == 0 {
                    on_checkpoint(self)?;
                }
            }
        }
        Ok(())
    }
}

/// Final parameters and training log.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub log: Vec<LogRecord>,
}

pub fn train(dataset: &[Trajectory], config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(dataset, config.clone())?;
    trainer.run(dataset, |_| Ok(()))?;
    Ok(TrainOutcome {
        params: trainer.params,
        optimizer: trainer.optimizer,
        log: trainer.log,
    })
}

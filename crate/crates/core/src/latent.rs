//! Categorical latent sampling with Gumbel noise, its softmax relaxation and
//! straight-through variant, the KL terms for both latent families, and the
//! temperature schedule.

use rand::distr::Open01;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_slice, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

/// Floor applied to probabilities before taking logs on the tape.
pub const PROB_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentFamily {
    Categorical,
    Gaussian,
}

/// `τ = max(τ_min, τ₀·exp(−rate·step))`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub initial: f64,
    pub min: f64,
    pub rate: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            initial: 1.0,
            min: 0.5,
            rate: 1e-4,
        }
    }
}

pub fn anneal_temperature(schedule: &TemperatureSchedule, step: u64) -> f64 {
    (schedule.initial * (-schedule.rate * step as f64).exp()).max(schedule.min)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentConfig {
    pub family: LatentFamily,
    /// Number of categories, or latent dimension for the Gaussian family.
    pub k: usize,
    pub temperature: TemperatureSchedule,
    /// Feed the hard one-hot sample forward and the relaxed gradient back.
    pub straight_through: bool,
}

impl LatentConfig {
    pub fn categorical(k: usize) -> Self {
        Self {
            family: LatentFamily::Categorical,
            k,
            temperature: TemperatureSchedule::default(),
            straight_through: true,
        }
    }

    pub fn gaussian(dim: usize) -> Self {
        Self {
            family: LatentFamily::Gaussian,
            ..Self::categorical(dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("latent k must be >= 2, got {}", self.k)));
        }
        let t = &self.temperature;
        if !(t.initial > 0.0 && t.min > 0.0 && t.rate >= 0.0) {
            return Err(Error::Config(format!("temperature schedule must stay positive: {t:?}")));
        }
        Ok(())
    }
}

/// Everything produced by one categorical draw.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelSample {
    pub probs: Tensor,
    pub noise: Tensor,
    pub relaxed: Tensor,
    pub hard: Tensor,
}

/// Standard Gumbel variate from a uniform `u ∈ (0, 1)`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

pub fn sample_gumbel(rng: &mut impl Rng, k: usize) -> Tensor {
    Tensor::vector(
        (0..k)
            .map(|_| gumbel_from_uniform(Open01.sample(rng)))
            .collect(),
    )
}

pub fn sample_standard_normal(rng: &mut impl Rng, d: usize) -> Tensor {
    Tensor::vector((0..d).map(|_| StandardNormal.sample(rng)).collect())
}

/// `one_hot(argmax(g + log λ))`; categories with zero probability never win.
pub fn gumbel_max(probs: &[f64], noise: &[f64]) -> Result<Tensor> {
    if probs.len() != noise.len() {
        return Err(Error::shape("gumbel_max", &[probs.len()], &[noise.len()]));
    }
    let scores: Vec<f64> = probs
        .iter()
        .zip(noise)
        .map(|(&p, &g)| if p > 0.0 { g + p.ln() } else { f64::MIN })
        .collect();
    Ok(Tensor::one_hot(probs.len(), argmax(&scores)))
}

/// Relaxed sample values without recording anything.
pub fn gumbel_softmax_values(probs: &[f64], noise: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }
    if probs.len() != noise.len() {
        return Err(Error::shape("gumbel_softmax", &[probs.len()], &[noise.len()]));
    }
    let logits: Vec<f64> = probs
        .iter()
        .zip(noise)
        .map(|(&p, &g)| (g + p.max(PROB_FLOOR).ln()) / tau)
        .collect();
    Ok(softmax_slice(&logits))
}

pub fn gumbel_sample(probs: &Tensor, noise: &Tensor, tau: f64) -> Result<GumbelSample> {
    let relaxed = Tensor::vector(gumbel_softmax_values(probs.data(), noise.data(), tau)?);
    let hard = Tensor::one_hot(relaxed.len(), relaxed.argmax());
    Ok(GumbelSample {
        probs: probs.clone(),
        noise: noise.clone(),
        relaxed,
        hard,
    })
}

/// `softmax((g + log λ) / τ)` on the tape, differentiable in `λ`.
pub fn gumbel_softmax(tape: &mut Tape<'_>, probs: Var, noise: &Tensor, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }
    let floored = tape.clamp_min(probs, PROB_FLOOR)?;
    let log_probs = tape.log(floored)?;
    gumbel_softmax_from_logits(tape, log_probs, noise, tau)
}

/// Same relaxation starting from log-probabilities.
pub fn gumbel_softmax_from_logits(
    tape: &mut Tape<'_>,
    log_probs: Var,
    noise: &Tensor,
    tau: f64,
) -> Result<Var> {
    let g = tape.constant(noise.clone());
    let perturbed = tape.add(log_probs, g)?;
    let scaled = tape.scale(perturbed, 1.0 / tau)?;
    tape.softmax(scaled)
}

/// One-hot forward value with an identity backward pass.
pub fn straight_through(tape: &mut Tape<'_>, relaxed: Var) -> Result<Var> {
    tape.straight_through(relaxed)
}

/// `KL(λ ‖ uniform) = Σ λᵢ log(k·λᵢ)` with `0·log 0 = 0`.
pub fn kl_categorical_uniform_value(probs: &[f64]) -> f64 {
    let k = probs.len() as f64;
    probs
        .iter()
        .map(|&p| if p > 0.0 { p * (k * p).ln() } else { 0.0 })
        .sum()
}

pub fn kl_categorical_uniform(tape: &mut Tape<'_>, probs: Var) -> Result<Var> {
    let k = tape.value(probs).len() as f64;
    let floored = tape.clamp_min(probs, PROB_FLOOR)?;
    let scaled = tape.scale(floored, k)?;
    let log_ratio = tape.log(scaled)?;
    let terms = tape.mul(probs, log_ratio)?;
    tape.sum(terms)
}

/// Reparameterised Gaussian sample `z = μ + σ⊙ε` and
/// `KL(N(μ, σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − log σ² − 1)`.
pub fn gaussian_latent(tape: &mut Tape<'_>, mean: Var, logvar: Var, eps: &Tensor) -> Result<(Var, Var)> {
    let half = tape.scale(logvar, 0.5)?;
    let sigma = tape.exp(half)?;
    let e = tape.constant(eps.clone());
    let spread = tape.mul(sigma, e)?;
    let z = tape.add(mean, spread)?;

    let var = tape.exp(logvar)?;
    let mean_sq = tape.mul(mean, mean)?;
    let a = tape.add(mean_sq, var)?;
    let b = tape.sub(a, logvar)?;
    let c = tape.shift(b, -1.0)?;
    let s = tape.sum(c)?;
    let kl = tape.scale(s, 0.5)?;
    Ok((z, kl))
}

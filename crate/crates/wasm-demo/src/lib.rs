//! Static browser explorer: Gumbel-Softmax sampling, the temperature
//! schedule, and reach-task rollouts for experts or a loaded checkpoint.
//!
//! Every export takes plain numbers or bytes and returns a JSON string.

use mmbc::checkpoint::read_checkpoint;
use mmbc::envs::{one_hot, rollout, EnvPolicy, ReachState, ReachTask, Task};
use mmbc::latent::{
    anneal_temperature, gumbel_max, gumbel_softmax_values, kl_categorical_uniform_value, sample_gumbel,
    LatentFamily, TemperatureSchedule,
};
use mmbc::model::ModelParams;
use mmbc::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const MAX_DRAWS: usize = 200_000;
const SHOWN_SAMPLES: usize = 6;

fn normalise(probs: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = probs.iter().sum();
    if probs.len() < 2 || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || !(total > 0.0) {
        return Err(Error::Contract(
            "need at least two non-negative weights with a positive sum".into(),
        ));
    }
    Ok(probs.iter().map(|p| p / total).collect())
}

/// Draws `draws` relaxed samples at temperature `tau`.
pub fn sample_relaxed(probs: &[f64], tau: f64, draws: usize, seed: u64) -> Result<Value> {
    let probs = normalise(probs)?;
    let k = probs.len();
    let draws = draws.clamp(1, MAX_DRAWS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wins = vec![0u64; k];
    let mut mean = vec![0.0; k];
    let mut samples = Vec::new();
    for i in 0..draws {
        let g = sample_gumbel(&mut rng, k);
        let y = gumbel_softmax_values(&probs, g.data(), tau)?;
        wins[gumbel_max(&probs, g.data())?.argmax()] += 1;
        for (m, v) in mean.iter_mut().zip(&y) {
            *m += v / draws as f64;
        }
        if i < SHOWN_SAMPLES {
            samples.push(y);
        }
    }
    let freq: Vec<f64> = wins.iter().map(|&w| w as f64 / draws as f64).collect();
    Ok(json!({
        "probs": probs,
        "tau": tau,
        "draws": draws,
        "hard_frequency": freq,
        "mean_relaxed": mean,
        "samples": samples,
        "kl_to_uniform": kl_categorical_uniform_value(&probs),
    }))
}

/// Temperature at evenly spaced steps of the annealing schedule.
pub fn schedule_curve(initial: f64, min: f64, rate: f64, steps: u64, points: usize) -> Result<Value> {
    if !(initial > 0.0 && min > 0.0 && rate >= 0.0) {
        return Err(Error::Contract("temperatures must be positive and the rate non-negative".into()));
    }
    let s = TemperatureSchedule { initial, min, rate };
    let points = points.clamp(2, 1000);
    let curve: Vec<[f64; 2]> = (0..points)
        .map(|i| {
            let step = steps * i as u64 / (points as u64 - 1);
            [step as f64, anneal_temperature(&s, step)]
        })
        .collect();
    Ok(json!({ "curve": curve }))
}

fn path_of(task: &ReachTask, start: &ReachState, policy: &mut EnvPolicy<'_>) -> Result<Value> {
    let (traj, outcome) = rollout(task, start, policy)?;
    let mut points: Vec<[f64; 2]> = (0..traj.len()).map(|t| [traj.states.row(t)[0], traj.states.row(t)[1]]).collect();
    // The final position is the last state plus one more step.
    let last = traj.len() - 1;
    let tail = [
        (traj.states.row(last)[0] + task.episode.dt * traj.actions.row(last)[0]).clamp(-1.0, 1.0),
        (traj.states.row(last)[1] + task.episode.dt * traj.actions.row(last)[1]).clamp(-1.0, 1.0),
    ];
    points.push(tail);
    let reached = match outcome {
        mmbc::envs::Outcome::Reach(r) => r,
        mmbc::envs::Outcome::Speed(_) => None,
    };
    Ok(json!({ "points": points, "reached": reached }))
}

/// Loads a categorical reach checkpoint written by the CLI.
pub fn reach_model(bytes: &[u8]) -> Result<ModelParams> {
    let ckpt = read_checkpoint(bytes)?;
    let task = ReachTask::default();
    let d = &ckpt.params.dims;
    if d.family != LatentFamily::Categorical || d.state_dim != task.state_dim() || d.action_dim != task.action_dim() {
        return Err(Error::Incompatible(format!(
            "expected a categorical reach model, got {:?} latent with state/action dims {}/{}",
            d.family, d.state_dim, d.action_dim
        )));
    }
    Ok(ckpt.params)
}

/// One episode layout: the expert path for every behavior and, with a
/// model, the path for every one-hot category.
pub fn reach_paths(seed: u64, model: Option<&ModelParams>) -> Result<Value> {
    let task = ReachTask::default();
    let start = task.reach_reset(&mut ChaCha8Rng::seed_from_u64(seed));
    let experts = (0..task.behaviors())
        .map(|b| path_of(&task, &start, &mut EnvPolicy::Expert(b)))
        .collect::<Result<Vec<_>>>()?;
    let categories = match model {
        None => Vec::new(),
        Some(params) => {
            let k = params.dims.latent_dim;
            (0..k)
                .map(|c| path_of(&task, &start, &mut EnvPolicy::Model { params, z: one_hot(k, c) }))
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(json!({
        "targets": start.targets,
        "radius": task.episode.success_radius,
        "experts": experts,
        "categories": categories,
    }))
}

fn js(r: Result<Value>) -> std::result::Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = sampleRelaxed)]
pub fn sample_relaxed_js(probs: &[f64], tau: f64, draws: usize, seed: u32) -> std::result::Result<String, JsError> {
    js(sample_relaxed(probs, tau, draws, seed as u64))
}

#[wasm_bindgen(js_name = scheduleCurve)]
pub fn schedule_curve_js(initial: f64, min: f64, rate: f64, steps: u32, points: usize) -> std::result::Result<String, JsError> {
    js(schedule_curve(initial, min, rate, steps as u64, points))
}

/// Holds an optional loaded checkpoint between calls.
#[wasm_bindgen]
#[derive(Default)]
pub struct Explorer {
    model: Option<ModelParams>,
}

#[wasm_bindgen]
impl Explorer {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the number of categories of the loaded model.
    #[wasm_bindgen(js_name = loadCheckpoint)]
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> std::result::Result<usize, JsError> {
        let params = reach_model(bytes).map_err(|e| JsError::new(&e.to_string()))?;
        let k = params.dims.latent_dim;
        self.model = Some(params);
        Ok(k)
    }

    #[wasm_bindgen(js_name = clearModel)]
    pub fn clear_model(&mut self) {
        self.model = None;
    }

    #[wasm_bindgen(js_name = reachPaths)]
    pub fn reach_paths(&self, seed: u32) -> std::result::Result<String, JsError> {
        js(reach_paths(seed as u64, self.model.as_ref()))
    }
}

//! Rollout-based evaluation: confusion matrices, category-to-behavior
//! assignment, purity and coverage, and the baselines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::envs::{generate_demos, one_hot, DemoConfig, EnvPolicy, Outcome, SpeedTask, Task};
use crate::error::{Error, Result};
use crate::latent::{sample_standard_normal, LatentConfig, LatentFamily};
use crate::model::{encode, mix_seed, train, LogRecord, ModelParams, Objective, TrainConfig, Trajectory};

/// Relative error under which a speed rollout counts as reproducing a behavior.
pub const SPEED_TOLERANCE: f64 = 0.15;

const EVAL_SALT: u64 = 0xE7A1_5EED;
const REFERENCE_SALT: u64 = 0x2EF5;

/// How rows of the confusion matrix are credited.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    /// Unlabelled categories: one-to-one max-trace assignment.
    Optimal,
    /// Row `i` is meant to reproduce behavior `i`.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub approach: String,
    pub env: String,
    pub matching: Matching,
    pub success_rate: f64,
    /// `confusion[row][behavior]`: rollouts of `row` that reproduced `behavior`.
    pub confusion: Vec<Vec<u64>>,
    /// Behavior credited to each row.
    pub assignment: Vec<Option<usize>>,
    pub episodes_per_row: usize,
    /// Credited successes divided by all successful rollouts.
    pub diagonal_mass: f64,
    pub purity: f64,
    pub coverage: usize,
    /// Mean achieved speed per row (speed task only).
    pub row_speeds: Option<Vec<f64>>,
    /// Speed of the row matched to each behavior (speed task only).
    pub matched_speeds: Option<Vec<Option<f64>>>,
    pub config: Value,
}

impl EvalReport {
    pub fn total_episodes(&self) -> usize {
        self.confusion.len() * self.episodes_per_row
    }

    /// Fraction of each row's successes landing on its majority behavior;
    /// `None` for rows without successes.
    pub fn row_consistency(&self) -> Vec<Option<f64>> {
        self.confusion
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                (total > 0).then(|| *row.iter().max().unwrap() as f64 / total as f64)
            })
            .collect()
    }
}

/// Minimum-cost one-to-one assignment of rows to columns (Hungarian method).
/// Returns the column for each row; with more rows than columns some rows
/// stay unassigned.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return vec![None; n];
    }
    if n > m {
        let transposed: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let cols = min_cost_assignment(&transposed);
        let mut rows = vec![None; n];
        for (j, i) in cols.into_iter().enumerate() {
            if let Some(i) = i {
                rows[i] = Some(j);
            }
        }
        return rows;
    }

    // Potentials formulation with 1-based indices; column 0 is a sentinel.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut rows = vec![None; n];
    for j in 1..=m {
        if owner[j] != 0 {
            rows[owner[j] - 1] = Some(j - 1);
        }
    }
    rows
}

/// One-to-one assignment maximising the matched total of `c`.
pub fn max_trace_assignment(c: &[Vec<u64>]) -> Vec<Option<usize>> {
    let cost: Vec<Vec<f64>> = c
        .iter()
        .map(|row| row.iter().map(|&x| -(x as f64)).collect())
        .collect();
    min_cost_assignment(&cost)
}

pub fn assigned_total(c: &[Vec<u64>], assignment: &[Option<usize>]) -> u64 {
    c.iter()
        .zip(assignment)
        .filter_map(|(row, a)| a.map(|j| row[j]))
        .sum()
}

/// Sum over rows of the row maximum, divided by the total; 0 for an empty
/// matrix.
pub fn purity(c: &[Vec<u64>]) -> f64 {
    let total: u64 = c.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    let majority: u64 = c.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    majority as f64 / total as f64
}

/// Number of behaviors that are the majority outcome of at least one row
/// with successes.
pub fn coverage(c: &[Vec<u64>]) -> usize {
    let mut hit: Vec<usize> = c
        .iter()
        .filter(|row| row.iter().any(|&x| x > 0))
        .map(|row| crate::tensor::argmax(&row.iter().map(|&x| x as f64).collect::<Vec<_>>()))
        .collect();
    hit.sort_unstable();
    hit.dedup();
    hit.len()
}

fn episode_rng(seed: u64, row: usize, episode: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed ^ EVAL_SALT, row as u64), episode as u64))
}

/// Rolls `rows × episodes` episodes. `policy_for(row, rng)` runs after the
/// reset and may draw from the same episode stream.
pub fn collect_outcomes<'p, T: Task>(
    task: &T,
    rows: usize,
    episodes: usize,
    seed: u64,
    mut policy_for: impl FnMut(usize, &mut ChaCha8Rng) -> Result<EnvPolicy<'p>>,
) -> Result<Vec<Vec<Outcome>>> {
    (0..rows)
        .map(|r| {
            (0..episodes)
                .map(|e| {
                    let mut rng = episode_rng(seed, r, e);
                    let start = task.reset(&mut rng);
                    let mut policy = policy_for(r, &mut rng)?;
                    Ok(crate::envs::rollout(task, &start, &mut policy)?.1)
                })
                .collect()
        })
        .collect()
}

fn credit(confusion: &[Vec<u64>], matching: Matching) -> Vec<Option<usize>> {
    match matching {
        Matching::Optimal => max_trace_assignment(confusion),
        Matching::Identity => (0..confusion.len())
            .map(|i| (i < confusion[0].len()).then_some(i))
            .collect(),
    }
}

fn finish(
    approach: &str,
    env: &str,
    matching: Matching,
    confusion: Vec<Vec<u64>>,
    episodes_per_row: usize,
) -> EvalReport {
    let assignment = credit(&confusion, matching);
    let successes: u64 = confusion.iter().flatten().sum();
    let credited = assigned_total(&confusion, &assignment);
    let total = (confusion.len() * episodes_per_row).max(1) as f64;
    EvalReport {
        approach: approach.to_string(),
        env: env.to_string(),
        matching,
        success_rate: credited as f64 / total,
        diagonal_mass: if successes == 0 {
            0.0
        } else {
            credited as f64 / successes as f64
        },
        purity: purity(&confusion),
        coverage: coverage(&confusion),
        assignment,
        confusion,
        episodes_per_row,
        row_speeds: None,
        matched_speeds: None,
        config: Value::Null,
    }
}

/// Confusion matrix and success rate for reach outcomes.
pub fn reach_report(
    approach: &str,
    outcomes: &[Vec<Outcome>],
    behaviors: usize,
    matching: Matching,
) -> Result<EvalReport> {
    let mut confusion = vec![vec![0u64; behaviors]; outcomes.len()];
    for (row, outs) in confusion.iter_mut().zip(outcomes) {
        for o in outs {
            match o {
                Outcome::Reach(Some(t)) => row[*t] += 1,
                Outcome::Reach(None) => {}
                Outcome::Speed(_) => return Err(Error::Contract("speed outcome in reach report".into())),
            }
        }
    }
    let episodes = outcomes.first().map_or(0, Vec::len);
    Ok(finish(approach, "reach", matching, confusion, episodes))
}

/// Speed outcomes: each rollout is binned to the behavior whose target speed
/// it matches within [`SPEED_TOLERANCE`]; rows are matched to behaviors by
/// nearest mean speed without reuse.
pub fn speed_report(
    approach: &str,
    outcomes: &[Vec<Outcome>],
    target_speeds: &[f64],
    matching: Matching,
) -> Result<EvalReport> {
    let mut confusion = vec![vec![0u64; target_speeds.len()]; outcomes.len()];
    let mut row_speeds = Vec::with_capacity(outcomes.len());
    for (row, outs) in confusion.iter_mut().zip(outcomes) {
        let mut sum = 0.0;
        for o in outs {
            let Outcome::Speed(v) = *o else {
                return Err(Error::Contract("reach outcome in speed report".into()));
            };
            sum += v;
            if let Some(j) = nearest_within(v, target_speeds) {
                row[j] += 1;
            }
        }
        row_speeds.push(sum / outs.len().max(1) as f64);
    }
    let episodes = outcomes.first().map_or(0, Vec::len);
    let mut report = finish(approach, "speed", matching, confusion, episodes);

    if matching == Matching::Optimal {
        let cost: Vec<Vec<f64>> = row_speeds
            .iter()
            .map(|s| target_speeds.iter().map(|t| (s - t).abs()).collect())
            .collect();
        report.assignment = min_cost_assignment(&cost);
        let credited = assigned_total(&report.confusion, &report.assignment);
        let successes: u64 = report.confusion.iter().flatten().sum();
        report.success_rate = credited as f64 / report.total_episodes().max(1) as f64;
        report.diagonal_mass = if successes == 0 {
            0.0
        } else {
            credited as f64 / successes as f64
        };
    }
    let mut matched = vec![None; target_speeds.len()];
    for (r, a) in report.assignment.iter().enumerate() {
        if let Some(j) = a {
            matched[*j] = Some(row_speeds[r]);
        }
    }
    report.row_speeds = Some(row_speeds);
    report.matched_speeds = Some(matched);
    Ok(report)
}

fn nearest_within(v: f64, targets: &[f64]) -> Option<usize> {
    let j = targets
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - v).abs().total_cmp(&(b.1 - v).abs()))?
        .0;
    (((v - targets[j]) / targets[j]).abs() <= SPEED_TOLERANCE).then_some(j)
}

/// Evaluation protocol settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Episodes per latent category (fresh configurations each).
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            seed: 0,
        }
    }
}

/// Rolls every one-hot category of a categorical model on the reach task.
pub fn evaluate_reach<T: Task>(params: &ModelParams, task: &T, cfg: &EvalConfig) -> Result<EvalReport> {
    check_model(params)?;
    let k = params.dims.latent_dim;
    let outcomes = collect_outcomes(task, k, cfg.episodes, cfg.seed, |r, _| {
        Ok(EnvPolicy::Model {
            params,
            z: one_hot(k, r),
        })
    })?;
    reach_report("categorical", &outcomes, task.behaviors(), Matching::Optimal)
}

/// Per-category achieved speeds of a categorical model.
pub fn evaluate_speed(params: &ModelParams, task: &SpeedTask, cfg: &EvalConfig) -> Result<EvalReport> {
    check_model(params)?;
    let k = params.dims.latent_dim;
    let outcomes = collect_outcomes(task, k, cfg.episodes, cfg.seed, |r, _| {
        Ok(EnvPolicy::Model {
            params,
            z: one_hot(k, r),
        })
    })?;
    speed_report("categorical", &outcomes, &task.target_speeds, Matching::Optimal)
}

fn check_model(params: &ModelParams) -> Result<()> {
    if !params.is_finite() {
        return Err(Error::NonFinite("model parameters"));
    }
    Ok(())
}

/// Approaches compared in the reach table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    Categorical,
    BcNolabel,
    BcLabel,
    GaussianPrior,
    GaussianEncoded,
}

impl Approach {
    pub const ALL: [Approach; 5] = [
        Approach::Categorical,
        Approach::BcNolabel,
        Approach::BcLabel,
        Approach::GaussianPrior,
        Approach::GaussianEncoded,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Approach::Categorical => "categorical",
            Approach::BcNolabel => "bc_nolabel",
            Approach::BcLabel => "bc_label",
            Approach::GaussianPrior => "gaussian_prior",
            Approach::GaussianEncoded => "gaussian_encoded",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown approach {s:?}")))
    }

    /// Adjusts a base training config to the variant this approach trains.
    pub fn train_config(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let k = base.latent.k;
        match self {
            Approach::Categorical => {
                cfg.objective = Objective::Cvae;
                cfg.latent = LatentConfig {
                    family: LatentFamily::Categorical,
                    ..base.latent
                };
            }
            Approach::BcNolabel | Approach::BcLabel => {
                cfg.objective = if self == Approach::BcLabel {
                    Objective::BcLabel
                } else {
                    Objective::BcNoLabel
                };
                cfg.latent = LatentConfig {
                    family: LatentFamily::Categorical,
                    ..base.latent
                };
            }
            Approach::GaussianPrior | Approach::GaussianEncoded => {
                cfg.objective = Objective::Cvae;
                cfg.latent = LatentConfig::gaussian(k);
            }
        }
        cfg
    }
}

/// Held-out expert demonstrations, one per behavior, in behavior order.
pub fn reference_trajectories<T: Task>(task: &T, seed: u64, noise_std: f64) -> Result<Vec<Trajectory>> {
    let demos = generate_demos(
        task,
        &DemoConfig {
            per_behavior: 1,
            noise_std,
            seed: mix_seed(seed, REFERENCE_SALT),
            max_retries: 10,
        },
    )?;
    let mut refs = vec![None; task.behaviors()];
    for d in demos {
        let b = d.label.expect("generated demos are labelled");
        refs[b] = Some(d);
    }
    Ok(refs.into_iter().map(|r| r.expect("one per behavior")).collect())
}

/// Evaluates an already-trained model under the latent-selection rule of
/// `approach`. `references` are needed for [`Approach::GaussianEncoded`].
///
/// Every approach gets `cfg.episodes` episodes per behavior, and row `i` of
/// the confusion matrix holds the episodes meant for behavior `i`. For the
/// approaches that cannot be told the behavior, rows differ only in their
/// start states.
pub fn evaluate_approach<T: Task>(
    approach: Approach,
    params: &ModelParams,
    task: &T,
    cfg: &EvalConfig,
    references: Option<&[Trajectory]>,
    report: impl Fn(&str, &[Vec<Outcome>], Matching) -> Result<EvalReport>,
) -> Result<EvalReport> {
    check_model(params)?;
    let k = params.dims.latent_dim;
    let behaviors = task.behaviors();
    let (outcomes, matching) = match approach {
        Approach::Categorical => (
            collect_outcomes(task, k, cfg.episodes, cfg.seed, |r, _| {
                Ok(EnvPolicy::Model { params, z: one_hot(k, r) })
            })?,
            Matching::Optimal,
        ),
        Approach::BcNolabel => (
            collect_outcomes(task, behaviors, cfg.episodes, cfg.seed, |_, _| {
                Ok(EnvPolicy::Model { params, z: vec![0.0; k] })
            })?,
            Matching::Identity,
        ),
        Approach::BcLabel => (
            collect_outcomes(task, behaviors, cfg.episodes, cfg.seed, |r, _| {
                Ok(EnvPolicy::Model { params, z: one_hot(k, r) })
            })?,
            Matching::Identity,
        ),
        Approach::GaussianPrior => (
            collect_outcomes(task, behaviors, cfg.episodes, cfg.seed, |_, rng| {
                let z = sample_standard_normal(rng, k).into_data();
                Ok(EnvPolicy::Model { params, z })
            })?,
            Matching::Identity,
        ),
        Approach::GaussianEncoded => {
            let refs = references.ok_or_else(|| {
                Error::Contract("gaussian_encoded needs one reference trajectory per behavior".into())
            })?;
            if refs.len() != behaviors {
                return Err(Error::Contract(format!(
                    "expected {behaviors} reference trajectories, got {}",
                    refs.len()
                )));
            }
            let codes = refs
                .iter()
                .map(|t| Ok(encode(t, params)?.point().data().to_vec()))
                .collect::<Result<Vec<_>>>()?;
            (
                collect_outcomes(task, behaviors, cfg.episodes, cfg.seed, |r, _| {
                    Ok(EnvPolicy::Model { params, z: codes[r].clone() })
                })?,
                Matching::Identity,
            )
        }
    };
    report(approach.name(), &outcomes, matching)
}

/// Trains the variant behind `approach` on `dataset`, then evaluates it on
/// the reach task.
pub fn run_baseline<T: Task>(
    approach: Approach,
    dataset: &[Trajectory],
    base: &TrainConfig,
    task: &T,
    cfg: &EvalConfig,
    references: Option<&[Trajectory]>,
) -> Result<(EvalReport, ModelParams)> {
    if approach == Approach::GaussianEncoded && references.is_none() {
        return Err(Error::Contract("gaussian_encoded needs reference trajectories".into()));
    }
    let outcome = train(dataset, &approach.train_config(base))?;
    let behaviors = task.behaviors();
    let report = evaluate_approach(approach, &outcome.params, task, cfg, references, |name, o, m| {
        reach_report(name, o, behaviors, m)
    })?;
    Ok((report, outcome.params))
}

/// One row per confusion-matrix cell: `row,behavior,count,assigned`.
pub fn confusion_csv(report: &EvalReport) -> String {
    let mut out = String::from("row,behavior,count,assigned\n");
    for (r, row) in report.confusion.iter().enumerate() {
        for (b, count) in row.iter().enumerate() {
            let assigned = report.assignment[r] == Some(b);
            out.push_str(&format!("{r},{b},{count},{}\n", assigned as u8));
        }
    }
    out
}

/// Training curve, one row per optimizer step.
pub fn log_csv(log: &[LogRecord]) -> String {
    let mut out = String::from("step,loss,recon,kl,tau,wall_ms\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.loss, r.recon, r.kl, r.tau, r.wall_ms
        ));
    }
    out
}

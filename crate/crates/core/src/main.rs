use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use mmbc::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use mmbc::config::RunConfig;
use mmbc::envs::{read_dataset_file, write_dataset_file, Env, Task};
use mmbc::eval::{
    confusion_csv, evaluate_approach, log_csv, reach_report, reference_trajectories, speed_report,
    Approach, EvalReport,
};
use mmbc::model::{ModelParams, Trainer, Trajectory};
use mmbc::{Error, Result};

#[derive(Parser)]
#[command(name = "mmbc", version, about = "Multi-modal behavior cloning with a categorical latent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert demonstrations for the configured env.
    GenDemos(Common),
    /// Train the configured approach on the dataset.
    Train(Common),
    /// Evaluate a checkpoint and write the report.
    Eval(Common),
    /// Train and evaluate one categorical model per k in `k_list`.
    SweepK(Common),
    /// Collect every eval report under the output directory into one table.
    Report(Common),
    /// Print the effective config as JSON.
    Config(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(t) = self.threshold {
            cfg.threshold = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn setup_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MMBC_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("MMBC_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn gen_demos(cfg: &RunConfig) -> Result<()> {
    let env = cfg.env()?;
    let demos = env.generate_demos(&cfg.demo_config())?;
    let path = cfg.dataset_path();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    write_dataset_file(&path, env.name(), &cfg.echo(), &demos)?;
    let mut counts = vec![0usize; env.behaviors()];
    for d in &demos {
        counts[d.label.unwrap_or(0)] += 1;
    }
    println!("wrote {} trajectories to {}", demos.len(), path.display());
    for (b, n) in counts.iter().enumerate() {
        println!("  behavior {b}: {n}");
    }
    Ok(())
}

fn load_demos(cfg: &RunConfig, env: &Env) -> Result<Vec<Trajectory>> {
    let path = cfg.dataset_path();
    let ds = read_dataset_file(&path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("{}: {io}", path.display())),
        other => other,
    })?;
    if ds.env != env.name() {
        return Err(Error::Incompatible(format!(
            "dataset is for env {:?}, config says {:?}",
            ds.env,
            env.name()
        )));
    }
    Ok(ds.trajectories)
}

fn artifact(cfg: &RunConfig, suffix: &str) -> PathBuf {
    cfg.out_dir.join(format!("{}.{suffix}", cfg.approach.name()))
}

/// Trains `cfg.approach`, writing periodic and final checkpoints plus the log.
fn train_run(cfg: &RunConfig, resume: Option<&Path>) -> Result<ModelParams> {
    let env = cfg.env()?;
    let demos = load_demos(cfg, &env)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let train_cfg = cfg.train_config();
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            check_dims(cfg, &env, &ckpt.params)?;
            Trainer::resume(ckpt.params, ckpt.optimizer, train_cfg)
        }
        None => Trainer::new(&demos, train_cfg)?,
    };
    let echo = cfg.echo();
    let save = |t: &Trainer, path: &Path| {
        save_checkpoint(
            path,
            &Checkpoint {
                params: t.params.clone(),
                optimizer: Some(t.optimizer.clone()),
                config: echo.clone(),
            },
        )
    };
    let result = trainer.run(&demos, |t| {
        save(t, &artifact(cfg, &format!("step{}.ckpt", t.step())))
    });
    fs::write(artifact(cfg, "log.csv"), log_csv(&trainer.log))?;
    if let Err(Error::Diverged { step, trajectory, last_good }) = result {
        let path = artifact(cfg, "last_good.ckpt");
        save_checkpoint(
            &path,
            &Checkpoint {
                params: (*last_good).clone(),
                optimizer: None,
                config: echo.clone(),
            },
        )?;
        eprintln!("last good parameters saved to {}", path.display());
        return Err(Error::Diverged { step, trajectory, last_good });
    }
    result?;
    let path = artifact(cfg, "ckpt");
    save(&trainer, &path)?;
    println!(
        "trained {} for {} steps; checkpoint {}",
        cfg.approach.name(),
        trainer.step(),
        path.display()
    );
    Ok(trainer.params)
}

fn check_dims(cfg: &RunConfig, env: &Env, params: &ModelParams) -> Result<()> {
    let d = &params.dims;
    let latent = cfg.latent();
    let (state_dim, action_dim) = match env {
        Env::Reach(t) => (t.state_dim(), t.action_dim()),
        Env::Speed(t) => (t.state_dim(), t.action_dim()),
    };
    if d.latent_dim != latent.k || d.family != latent.family {
        return Err(Error::Incompatible(format!(
            "checkpoint has {:?} latent of size {}, config expects {:?} of size {}",
            d.family, d.latent_dim, latent.family, latent.k
        )));
    }
    if d.state_dim != state_dim || d.action_dim != action_dim {
        return Err(Error::Incompatible(format!(
            "checkpoint is for state/action dims {}/{}, env {} has {state_dim}/{action_dim}",
            d.state_dim,
            d.action_dim,
            env.name()
        )));
    }
    Ok(())
}

fn evaluate(cfg: &RunConfig, params: &ModelParams) -> Result<EvalReport> {
    let env = cfg.env()?;
    check_dims(cfg, &env, params)?;
    let ecfg = cfg.eval_config();
    let mut report = match &env {
        Env::Reach(task) => {
            let refs = reference_trajectories(task, cfg.seed, cfg.noise_std)?;
            evaluate_approach(cfg.approach, params, task, &ecfg, Some(&refs), |n, o, m| {
                reach_report(n, o, task.behaviors(), m)
            })?
        }
        Env::Speed(task) => {
            let refs = reference_trajectories(task, cfg.seed, cfg.noise_std)?;
            evaluate_approach(cfg.approach, params, task, &ecfg, Some(&refs), |n, o, m| {
                speed_report(n, o, &task.target_speeds, m)
            })?
        }
    };
    report.config = cfg.echo();
    Ok(report)
}

fn write_report(cfg: &RunConfig, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    write_json(&artifact(cfg, "eval.json"), report)?;
    fs::write(artifact(cfg, "confusion.csv"), confusion_csv(report))?;
    println!(
        "{} on {}: success {:.2}% purity {:.3} coverage {}",
        report.approach,
        report.env,
        100.0 * report.success_rate,
        report.purity,
        report.coverage
    );
    for (r, row) in report.confusion.iter().enumerate() {
        println!("  row {r}: {row:?} -> {:?}", report.assignment[r]);
    }
    if let Some(speeds) = &report.row_speeds {
        println!("  row speeds: {speeds:.3?}");
    }
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<bool> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| artifact(cfg, "ckpt"));
    let ckpt = load_checkpoint(&path)?;
    let report = evaluate(cfg, &ckpt.params)?;
    write_report(cfg, &report)?;
    Ok(report.success_rate >= cfg.threshold)
}

fn sweep_k(cfg: &RunConfig) -> Result<()> {
    if cfg.k_list.is_empty() {
        return Err(Error::Config("k_list is empty".into()));
    }
    let mut rows = Vec::new();
    let mut table = String::from("k,success_rate,purity,coverage,min_consistency\n");
    for &k in &cfg.k_list {
        let sub = RunConfig {
            k,
            approach: Approach::Categorical,
            dataset: Some(cfg.dataset_path()),
            out_dir: cfg.out_dir.join(format!("k{k}")),
            ..cfg.clone()
        };
        let params = train_run(&sub, None)?;
        let report = evaluate(&sub, &params)?;
        write_report(&sub, &report)?;
        let min_consistency = report
            .row_consistency()
            .into_iter()
            .flatten()
            .fold(1.0, f64::min);
        table.push_str(&format!(
            "{k},{},{},{},{min_consistency}\n",
            report.success_rate, report.purity, report.coverage
        ));
        rows.push(json!({"k": k, "report": report}));
    }
    fs::write(cfg.out_dir.join("sweep_k.csv"), &table)?;
    write_json(&cfg.out_dir.join("sweep_k.json"), &json!({"config": cfg.echo(), "runs": rows}))?;
    print!("{table}");
    Ok(())
}

fn collect_reports(dir: &Path, out: &mut Vec<(PathBuf, EvalReport)>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            collect_reports(&path, out)?;
        } else if path.to_string_lossy().ends_with(".eval.json") {
            let report: EvalReport = serde_json::from_str(&fs::read_to_string(&path)?)?;
            out.push((path, report));
        }
    }
    Ok(())
}

fn report_cmd(cfg: &RunConfig) -> Result<()> {
    let mut reports = Vec::new();
    collect_reports(&cfg.out_dir, &mut reports)?;
    if reports.is_empty() {
        return Err(Error::Config(format!(
            "no *.eval.json reports under {}",
            cfg.out_dir.display()
        )));
    }
    let mut table = String::from("path,approach,env,success_rate,purity,coverage,diagonal_mass\n");
    for (path, r) in &reports {
        let rel = path.strip_prefix(&cfg.out_dir).unwrap_or(path);
        table.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            rel.display(),
            r.approach,
            r.env,
            r.success_rate,
            r.purity,
            r.coverage,
            r.diagonal_mass
        ));
    }
    fs::write(cfg.out_dir.join("summary.csv"), &table)?;
    let summary: Vec<Value> = reports
        .iter()
        .map(|(p, r)| json!({"path": p.strip_prefix(&cfg.out_dir).unwrap_or(p), "report": r}))
        .collect();
    write_json(&cfg.out_dir.join("summary.json"), &json!({"config": cfg.echo(), "reports": summary}))?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    setup_threads()?;
    match cli.command {
        Command::GenDemos(c) => gen_demos(&c.resolve()?).map(|_| true),
        Command::Train(c) => {
            let cfg = c.resolve()?;
            train_run(&cfg, c.checkpoint.as_deref()).map(|_| true)
        }
        Command::Eval(c) => eval_cmd(&c.resolve()?, c.checkpoint.as_deref()),
        Command::SweepK(c) => sweep_k(&c.resolve()?).map(|_| true),
        Command::Report(c) => report_cmd(&c.resolve()?).map(|_| true),
        Command::Config(c) => {
            println!("{}", serde_json::to_string_pretty(&c.resolve()?.echo())?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("success rate below threshold");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

//! Line-delimited JSON demonstration files.
//!
//! The first line is a header object `{"header": ...}` echoing the config
//! that produced the file. Every following line is one trajectory:
//! `{"states": [[..]], "actions": [[..]], "label": int, "env": str, "seed": int}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::Trajectory;

#[derive(Serialize, Deserialize)]
struct Record {
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    label: Option<usize>,
    env: String,
    seed: Option<u64>,
}

fn rows(t: &crate::tensor::Tensor) -> Vec<Vec<f64>> {
    (0..t.rows_cols().0).map(|r| t.row(r).to_vec()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub env: String,
    pub header: Option<Value>,
    pub trajectories: Vec<Trajectory>,
}

pub fn write_dataset(
    mut w: impl Write,
    env: &str,
    header: &Value,
    trajectories: &[Trajectory],
) -> Result<()> {
    serde_json::to_writer(&mut w, &serde_json::json!({ "header": header }))?;
    w.write_all(b"\n")?;
    for t in trajectories {
        let rec = Record {
            states: rows(&t.states),
            actions: rows(&t.actions),
            label: t.label,
            env: env.to_string(),
            seed: t.seed,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset_file(
    path: impl AsRef<Path>,
    env: &str,
    header: &Value,
    trajectories: &[Trajectory],
) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), env, header, trajectories)
}

/// Parses a dataset, rejecting files that mix env tags.
pub fn read_dataset(r: impl Read) -> Result<Dataset> {
    let mut env: Option<String> = None;
    let mut header = None;
    let mut trajectories = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: line_no, msg };
        let value: Value = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if let Some(h) = value.get("header") {
            header = Some(h.clone());
            continue;
        }
        let rec: Record = serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
        match &env {
            None => env = Some(rec.env.clone()),
            Some(e) if *e != rec.env => {
                return Err(parse_err(format!("env {:?} mixed with {e:?}", rec.env)));
            }
            Some(_) => {}
        }
        let mut traj = Trajectory::from_rows(&rec.states, &rec.actions, rec.label)
            .map_err(|e| parse_err(e.to_string()))?;
        traj.seed = rec.seed;
        trajectories.push(traj);
    }
    let env = env.ok_or(Error::Parse {
        line: 0,
        msg: "dataset has no trajectories".into(),
    })?;
    Ok(Dataset {
        env,
        header,
        trajectories,
    })
}

pub fn read_dataset_file(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(File::open(path)?)
}

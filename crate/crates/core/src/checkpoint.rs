//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//! `"MMBC"`, `u32` format version, `u32` header length, header JSON,
//! `u32` tensor count, then per tensor: `u32` name length, UTF-8 name,
//! `u32` rank, `rank × u64` extents, raw `f64` values.
//!
//! The header carries the model dimensions, the Adam settings and step, and
//! the config echo of the run that wrote the file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams};
use crate::optim::{AdamConfig, OptimizerState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MMBC";
pub const FORMAT_VERSION: u32 = 1;

const FIRST_MOMENT: &str = "adam.m.";
const SECOND_MOMENT: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
    pub config: Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dims: ModelDims,
    adam: Option<AdamConfig>,
    step: u64,
    config: Value,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Contract(format!("{what} too large for checkpoint")))
}

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    write_u32(w, len_u32(name.len(), "name")?)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, len_u32(t.rank(), "rank")?)?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor)> {
    let name_len = read_u32(r)? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| Error::Incompatible("tensor name is not UTF-8".into()))?;
    let rank = read_u32(r)? as usize;
    let shape = (0..rank)
        .map(|_| Ok(read_u64(r)? as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| Error::Incompatible(format!("tensor {name}: {e}")))?;
    Ok((name, t))
}

pub fn write_checkpoint(mut w: impl Write, ckpt: &Checkpoint) -> Result<()> {
    let header = Header {
        dims: ckpt.params.dims.clone(),
        adam: ckpt.optimizer.as_ref().map(|o| o.config),
        step: ckpt.optimizer.as_ref().map_or(0, |o| o.step),
        config: ckpt.config.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    write_u32(&mut w, len_u32(header.len(), "header")?)?;
    w.write_all(&header)?;

    let named = ckpt.params.named_tensors();
    let extra = if ckpt.optimizer.is_some() { 3 } else { 1 };
    write_u32(&mut w, len_u32(named.len() * extra, "tensor count")?)?;
    for (name, t) in &named {
        write_tensor(&mut w, name, t)?;
    }
    if let Some(opt) = &ckpt.optimizer {
        for ((name, _), m) in named.iter().zip(&opt.first) {
            write_tensor(&mut w, &format!("{FIRST_MOMENT}{name}"), m)?;
        }
        for ((name, _), v) in named.iter().zip(&opt.second) {
            write_tensor(&mut w, &format!("{SECOND_MOMENT}{name}"), v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Incompatible("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header_len = read_u32(&mut r)? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;

    let mut params = ModelParams::zeros(header.dims);
    let names = params.names();
    let count = read_u32(&mut r)? as usize;
    let mut stored = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, t) = read_tensor(&mut r)?;
        if stored.insert(name.clone(), t).is_some() {
            return Err(Error::Incompatible(format!("duplicate tensor {name}")));
        }
    }

    let mut take = |name: &str, like: &Tensor| -> Result<Tensor> {
        let t = stored
            .remove(name)
            .ok_or_else(|| Error::Incompatible(format!("missing tensor {name}")))?;
        if t.shape() != like.shape() {
            return Err(Error::Incompatible(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                like.shape()
            )));
        }
        Ok(t)
    };

    for (name, slot) in names.iter().zip(params.tensors_mut()) {
        *slot = take(name, slot)?;
    }
    let optimizer = match header.adam {
        None => None,
        Some(config) => {
            let mut first = Vec::with_capacity(names.len());
            let mut second = Vec::with_capacity(names.len());
            for (name, p) in names.iter().zip(params.tensors()) {
                first.push(take(&format!("{FIRST_MOMENT}{name}"), p)?);
                second.push(take(&format!("{SECOND_MOMENT}{name}"), p)?);
            }
            Some(OptimizerState {
                config,
                step: header.step,
                first,
                second,
            })
        }
    };
    if let Some(name) = stored.keys().min() {
        return Err(Error::Incompatible(format!("unexpected tensor {name}")));
    }
    Ok(Checkpoint {
        params,
        optimizer,
        config: header.config,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), ckpt)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

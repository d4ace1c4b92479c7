//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "MGCKPT\r\n"
//! version   u32
//! hdr_len   u64
//! header    hdr_len bytes of JSON (model spec, config, counters, tensor table)
//! payload   f64 values: parameters, then optimizer moments, tensor by tensor
//! ```
//!
//! Values are stored bit-exactly, so a decoded state continues training
//! identically to the state that was saved.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ActionLabelSpace;
use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::network::{ModelParams, ModelSpec};
use crate::train::{OptimizerKind, OptimizerState, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"MGCKPT\r\n";
pub const FORMAT_VERSION: u32 = 1;

/// A saved run: training state plus what is needed to interpret it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub config: TrainConfig,
    pub label_names: Vec<String>,
    /// Number of metrics records written when the checkpoint was taken.
    pub log_len: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelSpec,
    config: TrainConfig,
    label_names: Vec<String>,
    step: u64,
    epoch: u64,
    batch_cursor: u64,
    best_val_map: Option<f64>,
    log_len: u64,
    optimizer: OptimizerKind,
    optimizer_t: u64,
    tensors: Vec<TensorEntry>,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn moment_sets(kind: OptimizerKind) -> usize {
    match kind {
        OptimizerKind::Adam => 2,
        OptimizerKind::Momentum => 1,
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let s = &ckpt.state;
    let (optimizer_t, moments): (u64, Vec<&ModelParams>) = match &s.optimizer {
        OptimizerState::Adam { m, v, t } => (*t, vec![m, v]),
        OptimizerState::Momentum { velocity } => (0, vec![velocity]),
    };
    let header = Header {
        model: s.params.spec.clone(),
        config: ckpt.config.clone(),
        label_names: ckpt.label_names.clone(),
        step: s.step,
        epoch: s.epoch,
        batch_cursor: s.batch_cursor,
        best_val_map: s.best_val_map,
        log_len: ckpt.log_len,
        optimizer: s.optimizer.kind(),
        optimizer_t,
        tensors: s
            .params
            .tensors()
            .into_iter()
            .map(|t| TensorEntry {
                name: t.name,
                shape: t.shape,
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + header.len() + 8 * s.params.num_parameters() * (1 + moments.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in std::iter::once(&s.params).chain(moments) {
        for t in p.tensors() {
            for v in t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Strictly validates and decodes a checkpoint.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or_else(|| err("not a checkpoint (bad magic)"))?;
    let (version, rest) = split_u32(rest)?;
    if version != FORMAT_VERSION {
        return Err(err(format!("unsupported format version {version}")));
    }
    let (hdr_len, rest) = split_u64(rest)?;
    let hdr_len = usize::try_from(hdr_len).ok().filter(|&n| n <= rest.len()).ok_or_else(|| err("truncated header"))?;
    let (header, payload) = rest.split_at(hdr_len);
    let header: Header = serde_json::from_slice(header).map_err(|e| err(format!("bad header: {e}")))?;

    header.model.validate()?;
    header.config.validate()?;
    let labels = ActionLabelSpace::new(header.label_names.clone())?;
    if labels.len() != header.model.num_classes {
        return Err(err(format!(
            "{} label names for a {}-class model",
            labels.len(),
            header.model.num_classes
        )));
    }
    let expected = header.model.tensor_shapes();
    let listed: Vec<(&str, &[usize])> = header.tensors.iter().map(|t| (t.name.as_str(), t.shape.as_slice())).collect();
    let wanted: Vec<(&str, &[usize])> = expected.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
    if listed != wanted {
        return Err(err("tensor table does not match the model spec"));
    }
    let per_set = expected
        .iter()
        .try_fold(0usize, |acc, (_, shape)| {
            shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).and_then(|n| acc.checked_add(n))
        })
        .ok_or_else(|| err("tensor sizes overflow"))?;
    let sets = 1 + moment_sets(header.optimizer);
    let want_bytes = per_set
        .checked_mul(sets)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| err("tensor sizes overflow"))?;
    if payload.len() != want_bytes {
        return Err(err(format!("payload is {} bytes, expected {want_bytes}", payload.len())));
    }
    if header.optimizer == OptimizerKind::Momentum && header.optimizer_t != 0 {
        return Err(err("momentum state carries an adaptive step count"));
    }
    if header.best_val_map.is_some_and(|m| !(0.0..=1.0).contains(&m)) {
        return Err(err("best validation mAP out of range"));
    }

    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut read_set = || -> Result<ModelParams> {
        let mut p = ModelParams::zeros(&header.model)?;
        for t in p.tensors_mut() {
            for (dst, v) in t.iter_mut().zip(values.by_ref()) {
                if !v.is_finite() {
                    return Err(err("non-finite value in payload"));
                }
                *dst = v;
            }
        }
        Ok(p)
    };
    let params = read_set()?;
    let optimizer = match header.optimizer {
        OptimizerKind::Adam => {
            let m = read_set()?;
            let v = read_set()?;
            if v.tensors().iter().any(|t| t.data.iter().any(|&x| x < 0.0)) {
                return Err(err("negative second moment"));
            }
            OptimizerState::Adam {
                m,
                v,
                t: header.optimizer_t,
            }
        }
        OptimizerKind::Momentum => OptimizerState::Momentum { velocity: read_set()? },
    };
    Ok(Checkpoint {
        state: TrainState {
            params,
            optimizer,
            step: header.step,
            epoch: header.epoch,
            batch_cursor: header.batch_cursor,
            best_val_map: header.best_val_map,
        },
        config: header.config,
        label_names: header.label_names,
        log_len: header.log_len,
    })
}

fn split_u32(b: &[u8]) -> Result<(u32, &[u8])> {
    let (head, rest) = b.split_first_chunk::<4>().ok_or_else(|| err("truncated"))?;
    Ok((u32::from_le_bytes(*head), rest))
}

fn split_u64(b: &[u8]) -> Result<(u64, &[u8])> {
    let (head, rest) = b.split_first_chunk::<8>().ok_or_else(|| err("truncated"))?;
    Ok((u64::from_le_bytes(*head), rest))
}

/// Writes atomically via a temporary sibling file.
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode(ckpt))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

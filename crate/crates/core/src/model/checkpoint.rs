//! Binary checkpoint container.
//!
//! Layout: `b"CCT1"`, header length as `u64` LE, JSON header, then until EOF one blob
//! per parameter: name length `u32`, UTF-8 name, rank `u32`, dims `u64` each, and the
//! values as LE `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CctModel, ModelConfig};
use crate::budget::BudgetSpec;
use crate::error::{CctError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CCT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub budgets: BudgetSpec,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<(String, Tensor)>,
}

pub fn encode_checkpoint(model: &CctModel, step: usize) -> Vec<u8> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        budgets: model.budgets.clone(),
        step,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, name, t) in model.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &dim in t.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CctError::format(format!("checkpoint truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Parses a checkpoint without building a model.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(CctError::format("not a checkpoint: bad magic bytes"));
    }
    let len = r.u64("header length")?;
    if len > r.remaining() as u64 {
        return Err(CctError::format("checkpoint truncated inside the header"));
    }
    let json = r.take(len as usize, "header")?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| CctError::format(format!("checkpoint header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CctError::format(format!(
            "checkpoint format_version {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let mut params = Vec::new();
    while r.remaining() > 0 {
        let n = r.u32("parameter name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "parameter name")?)
            .map_err(|_| CctError::format("parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u32("parameter rank")? as usize;
        if rank > 8 {
            return Err(CctError::format(format!("parameter {name}: rank {rank} is implausible")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let dim = r.u64("parameter shape")?;
            numel = numel
                .checked_mul(dim)
                .ok_or_else(|| CctError::format(format!("parameter {name}: shape overflows")))?;
            shape.push(dim as usize);
        }
        if numel.checked_mul(8).is_none_or(|b| b > r.remaining() as u64) {
            return Err(CctError::format(format!("checkpoint truncated inside parameter {name}")));
        }
        let data = r
            .take(numel as usize * 8, "parameter values")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((name, Tensor::new(shape, data)?));
    }
    Ok(Checkpoint { header, params })
}

/// Names the first differing field between two configurations.
fn config_mismatch(expected: &ModelConfig, found: &ModelConfig) -> Option<String> {
    let a = serde_json::to_value(expected).ok()?;
    let b = serde_json::to_value(found).ok()?;
    let (a, b) = (a.as_object()?, b.as_object()?);
    a.iter().find(|(k, v)| b.get(*k) != Some(*v)).map(|(k, v)| {
        format!(
            "config mismatch in `model.{k}`: expected {v}, checkpoint has {}",
            b.get(k).cloned().unwrap_or_default()
        )
    })
}

impl Checkpoint {
    /// Builds the model described by the header and fills in every parameter.
    pub fn into_model(self, expected: Option<&ModelConfig>) -> Result<CctModel> {
        if let Some(e) = expected {
            if let Some(msg) = config_mismatch(e, &self.header.model) {
                return Err(CctError::format(msg));
            }
        }
        let mut model = CctModel::new(self.header.model, self.header.budgets)
            .map_err(|e| CctError::format(format!("checkpoint describes an invalid model: {e}")))?;
        if self.params.len() != model.store.len() {
            return Err(CctError::format(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, t) in self.params {
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| CctError::format(format!("unknown parameter `{name}`")))?;
            let slot = model.store.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(CctError::format(format!(
                    "parameter `{name}`: shape {:?} in checkpoint, {:?} in model",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &CctModel, step: usize, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, step)).map_err(|e| CctError::io(path, e))
}

/// Reads a checkpoint. With `expected`, a differing configuration is a format error that
/// names the field.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<(CctModel, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(|e| CctError::io(path, e))?;
    let ck = decode_checkpoint(&bytes)?;
    let header = ck.header.clone();
    Ok((ck.into_model(expected)?, header))
}

/// Stable 64-bit FNV-1a digest of checkpoint bytes, printed as hex in reports.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

//! Checkpoint binary format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "HGMK"
//! u32 version            1 = f32 payload, 2 = f64 payload
//! u32 entry count
//! per entry: u16 name length, UTF-8 name, u8 ndims, u32 dims[],
//!            raw little-endian float payload
//! u32 json length, UTF-8 JSON blob (config snapshot + final epoch/loss)
//! ```

use super::{TrainConfig, TrainError};
use crate::model::{FiCoModel, ModelConfig};
use crate::scalar::{Precision, Scalar};
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: &[u8; 4] = b"HGMK";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub d0: usize,
    pub final_epoch: usize,
    pub final_loss: f64,
}

/// Named parameter tensors plus the configuration that produced them.
#[derive(Debug, Clone)]
pub struct Checkpoint<F: Scalar> {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Vec<usize>, Vec<F>)>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn from_model(model: &FiCoModel<F>, meta: CheckpointMeta) -> Self {
        let params = model
            .store
            .iter()
            .map(|(_, e)| (e.name.clone(), e.shape.clone(), e.values.clone()))
            .collect();
        Checkpoint { meta, params }
    }

    /// Rebuilds the model skeleton from the config and installs the stored
    /// parameters; every parameter must appear exactly once by name.
    pub fn into_model(self) -> Result<FiCoModel<F>, TrainError> {
        let model_cfg = self.meta.config.model_config(self.meta.d0);
        let mut model = FiCoModel::new(model_cfg, self.meta.config.model_seed());
        let mut seen = vec![false; model.store.len()];
        for (name, shape, values) in self.params {
            let id = model
                .store
                .by_name(&name)
                .ok_or_else(|| TrainError::Checkpoint(format!("unknown parameter {name}")))?;
            if std::mem::replace(&mut seen[id.0], true) {
                return Err(TrainError::Checkpoint(format!("duplicate parameter {name}")));
            }
            let entry = model.store.get(id);
            if entry.shape != shape {
                return Err(TrainError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    shape, entry.shape
                )));
            }
            model.store.values_mut(id).copy_from_slice(&values);
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            let name = model
                .store
                .iter()
                .nth(missing)
                .map(|(_, e)| e.name.clone())
                .unwrap_or_default();
            return Err(TrainError::Checkpoint(format!("parameter {name} missing")));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let version: u32 = match F::PRECISION {
            Precision::F32 => 1,
            Precision::F64 => 2,
        };
        out.extend_from_slice(&version.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, shape, values) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for &dim in shape {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &v in values {
                v.write_le(&mut out);
            }
        }
        let json = serde_json::to_vec(&self.meta).expect("checkpoint meta serialization");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(TrainError::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        let expected = match F::PRECISION {
            Precision::F32 => 1,
            Precision::F64 => 2,
        };
        if version != expected {
            return Err(TrainError::Checkpoint(format!(
                "version {version} holds a different float width than requested"
            )));
        }
        let count = r.u32()? as usize;
        let width = F::PRECISION.byte_width();
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| TrainError::Checkpoint("parameter name is not UTF-8".into()))?;
            let ndims = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * width)?;
            let values = raw.chunks_exact(width).map(F::read_le).collect();
            params.push((name, shape, values));
        }
        let json_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| TrainError::Checkpoint(format!("bad config blob: {e}")))?;
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Reads just the payload precision so callers can pick the element type.
pub fn peek_precision(bytes: &[u8]) -> Result<Precision, TrainError> {
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(TrainError::Checkpoint("bad magic bytes".into()));
    }
    match u32::from_le_bytes(bytes[4..8].try_into().unwrap()) {
        1 => Ok(Precision::F32),
        2 => Ok(Precision::F64),
        v => Err(TrainError::Checkpoint(format!("unknown version {v}"))),
    }
}

impl TrainConfig {
    pub fn model_config(&self, d0: usize) -> ModelConfig {
        ModelConfig {
            d0,
            d: self.d,
            scales: self.scales,
            l_gt: self.l_gt,
            gin_layers: self.gin_layers,
            gt_layers: self.gt_layers,
            rwpe_k: self.rwpe_k,
            gamma_sce: self.gamma_sce,
            remask_decoder: self.remask_decoder,
            gt_decoder_at_top: self.gt_decoder_at_top,
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.bytes.len() {
            return Err(TrainError::Checkpoint("truncated checkpoint".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, TrainError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

//! Checkpoint codec.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! bytes 0..4   magic "MOTF"
//! bytes 4..8   u32 format version (currently 1)
//! bytes 8..16  u64 metadata length in bytes
//! ...          metadata JSON (CheckpointMeta)
//! ...          parameters as f64, checkpoint order
//! ...          optional optimizer moments: first moment then second,
//!              each param_count f64 values, present iff meta.optimizer is set
//! ```
//!
//! The file length is fully determined by the metadata; trailing or missing
//! bytes are format errors. Parameters round-trip bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::{PathSpec, TrainMode};

use super::{ConditionedModel, ModelConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MOTF";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Name and shape of one parameter tensor, recorded for mismatch detection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Presence and position of optimizer state in the file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub kind: String,
    /// Number of optimizer steps taken (drives bias correction on resume).
    pub step: u64,
}

/// Everything needed to rebuild the model and continue or evaluate a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub path: PathSpec,
    pub mode: TrainMode,
    pub seed: u64,
    pub epochs_completed: usize,
    pub params: Vec<ParamInfo>,
    pub param_count: usize,
    #[serde(default)]
    pub optimizer: Option<OptimizerMeta>,
    /// Free-form provenance: config digest, dataset name, noise power.
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// A checkpoint read back from disk.
pub struct LoadedCheckpoint {
    pub model: ConditionedModel,
    pub meta: CheckpointMeta,
    /// Optimizer first and second moments in checkpoint parameter order.
    pub moments: Option<(Vec<f64>, Vec<f64>)>,
}

fn fmt_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn push_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    buf.reserve(vals.len() * 8);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks_exact(8)")))
        .collect()
}

/// Writes `model` and `meta` to `file`. The parameter inventory in `meta` is
/// rebuilt from the model, so callers only fill the provenance fields.
/// `moments` must be present exactly when `meta.optimizer` is set, each slice
/// holding one f64 per parameter.
pub fn save_checkpoint(
    file: &Path,
    model: &ConditionedModel,
    mut meta: CheckpointMeta,
    moments: Option<(&[f64], &[f64])>,
) -> Result<()> {
    let named = model.parameters();
    meta.params = named
        .iter()
        .map(|(name, t)| ParamInfo {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    meta.param_count = named.iter().map(|(_, t)| t.len()).sum();

    if meta.optimizer.is_some() != moments.is_some() {
        return Err(fmt_err(
            file,
            "optimizer metadata and moment buffers must be given together",
        ));
    }
    if let Some((m, v)) = moments {
        if m.len() != meta.param_count || v.len() != meta.param_count {
            return Err(fmt_err(
                file,
                format!(
                    "moment buffers hold {}/{} values, model has {} parameters",
                    m.len(),
                    v.len(),
                    meta.param_count
                ),
            ));
        }
    }

    let meta_json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::with_capacity(16 + meta_json.len() + meta.param_count * 8);
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    push_f64s(&mut buf, &model.flat_params());
    if let Some((m, v)) = moments {
        push_f64s(&mut buf, m);
        push_f64s(&mut buf, v);
    }
    fs::write(file, buf).map_err(|e| Error::io(file, e))
}

/// Reads a checkpoint, validates the format against the metadata, and
/// reconstructs the model with bit-exact parameters.
pub fn load_checkpoint(file: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(file).map_err(|e| fmt_err(file, format!("cannot read: {e}")))?;
    load_from_bytes(file, &bytes)
}

fn load_from_bytes(path: &Path, bytes: &[u8]) -> Result<LoadedCheckpoint> {
    if bytes.len() < 16 {
        return Err(fmt_err(path, format!("file holds {} bytes, header needs 16", bytes.len())));
    }
    if bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(fmt_err(path, "bad magic, not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(fmt_err(
            path,
            format!("format version {version}, this build reads {CHECKPOINT_VERSION}"),
        ));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize.checked_add(meta_len).ok_or_else(|| {
        fmt_err(path, "metadata length overflows")
    })?;
    if bytes.len() < body_start {
        return Err(fmt_err(
            path,
            format!("metadata claims {meta_len} bytes, file ends early"),
        ));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..body_start])
        .map_err(|e| fmt_err(path, format!("metadata is not valid JSON: {e}")))?;

    // rebuild the skeleton and cross-check the recorded inventory
    let model_cfg = meta.model.clone();
    model_cfg.validate()?;
    let mut model = ConditionedModel::init(model_cfg, 0)?;
    let named = model.parameters();
    if named.len() != meta.params.len() {
        return Err(Error::CheckpointMismatch(format!(
            "file lists {} parameter tensors, the configured model has {}",
            meta.params.len(),
            named.len()
        )));
    }
    for ((name, tensor), info) in named.iter().zip(&meta.params) {
        if *name != info.name || tensor.shape() != info.shape.as_slice() {
            return Err(Error::CheckpointMismatch(format!(
                "parameter `{}` {:?} in file vs `{}` {:?} in model",
                info.name,
                info.shape,
                name,
                tensor.shape()
            )));
        }
    }
    let count: usize = named.iter().map(|(_, t)| t.len()).sum();
    if count != meta.param_count {
        return Err(Error::CheckpointMismatch(format!(
            "param_count {} disagrees with the listed shapes ({count})",
            meta.param_count
        )));
    }

    let moment_blocks = if meta.optimizer.is_some() { 2 } else { 0 };
    let expected_len = body_start + (1 + moment_blocks) * count * 8;
    if bytes.len() != expected_len {
        return Err(fmt_err(
            path,
            format!("file holds {} bytes, layout requires {expected_len}", bytes.len()),
        ));
    }

    let params = read_f64s(&bytes[body_start..body_start + count * 8]);
    model.load_flat_params(&params)?; // rejects non-finite values

    let moments = if meta.optimizer.is_some() {
        let m_start = body_start + count * 8;
        let v_start = m_start + count * 8;
        let m = read_f64s(&bytes[m_start..v_start]);
        let v = read_f64s(&bytes[v_start..]);
        if m.iter().any(|x| !x.is_finite()) || v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(fmt_err(path, "optimizer moments are corrupt"));
        }
        Some((m, v))
    } else {
        None
    };

    Ok(LoadedCheckpoint {
        model,
        meta,
        moments,
    })
}

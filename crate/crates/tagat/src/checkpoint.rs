//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `TAGATCK1`, a little-endian `u64` header length,
//! a JSON header, then every parameter tensor followed by the two optimiser
//! moment tensors of each parameter, all as little-endian `f32` in header
//! order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tagat_core::model::Variant;
use tagat_core::train::{AdamState, CheckpointState, Stage, TrainConfig, TrainError};
use tagat_core::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"TAGATCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("checkpoint format version {0}, this build reads {FORMAT_VERSION}")]
    Version(u32),
    #[error("config fingerprint mismatch: header says {stored}, config hashes to {computed}")]
    Fingerprint { stored: String, computed: String },
    #[error("truncated or oversized checkpoint: {0}")]
    Layout(String),
    #[error("bad header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    fingerprint: String,
    config: TrainConfig,
    stage: Stage,
    variant: Variant,
    epoch: usize,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Hex SHA-256 of the config's canonical JSON.
pub fn config_fingerprint(config: &TrainConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serialises");
    format!("{:x}", Sha256::digest(json))
}

pub fn encode(state: &CheckpointState) -> Vec<u8> {
    let header = Header {
        version: FORMAT_VERSION,
        fingerprint: config_fingerprint(&state.config),
        config: state.config.clone(),
        stage: state.stage,
        variant: state.variant,
        epoch: state.epoch,
        adam_step: state.adam.step,
        tensors: state
            .params
            .entries()
            .iter()
            .map(|e| TensorEntry { name: e.name.clone(), shape: e.value.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + json.len() + 12 * state.params.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (i, e) in state.params.entries().iter().enumerate() {
        for t in [&e.value, &state.adam.m[i], &state.adam.v[i]] {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<CheckpointState, CheckpointError> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body_start = 16usize.checked_add(len).filter(|&e| e <= bytes.len());
    let Some(body_start) = body_start else {
        return Err(CheckpointError::Layout("header runs past the end".into()));
    };
    let version: serde_json::Value = serde_json::from_slice(&bytes[16..body_start])?;
    let v = version.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if v != FORMAT_VERSION {
        return Err(CheckpointError::Version(v));
    }
    let header: Header = serde_json::from_value(version)?;
    let computed = config_fingerprint(&header.config);
    if computed != header.fingerprint {
        return Err(CheckpointError::Fingerprint { stored: header.fingerprint, computed });
    }

    let mut body = &bytes[body_start..];
    let mut take = |shape: &[usize]| -> Result<Tensor<f32>, CheckpointError> {
        let n: usize = shape.iter().product();
        if body.len() < 4 * n {
            return Err(CheckpointError::Layout("tensor data truncated".into()));
        }
        let (head, rest) = body.split_at(4 * n);
        body = rest;
        let data = head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Tensor::from_vec(shape, data))
    };
    let mut params = ParamStore::new();
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for t in &header.tensors {
        params.add(t.name.clone(), take(&t.shape)?);
        m.push(take(&t.shape)?);
        v.push(take(&t.shape)?);
    }
    if !body.is_empty() {
        return Err(CheckpointError::Layout(format!("{} trailing bytes", body.len())));
    }
    let state = CheckpointState {
        config: header.config,
        stage: header.stage,
        variant: header.variant,
        epoch: header.epoch,
        params,
        adam: AdamState { step: header.adam_step, m, v },
    };
    // names and shapes must match the architecture the config describes
    state.model()?;
    Ok(state)
}

pub fn save(path: &Path, state: &CheckpointState) -> Result<(), CheckpointError> {
    fs::write(path, encode(state)).map_err(|source| CheckpointError::Io { path: path.into(), source })
}

pub fn load(path: &Path) -> Result<CheckpointState, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.into(), source })?;
    decode(&bytes)
}

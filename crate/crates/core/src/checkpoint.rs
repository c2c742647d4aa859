//! Versioned binary checkpoints for training state.
//!
//! Layout: 8-byte magic `SSVAECK1` ‖ u32 LE format version ‖ u64 LE header
//! length ‖ JSON header (model + train configs, step, array manifest) ‖ raw
//! f64 LE array data in manifest order (parameters, then Adam first and
//! second moments) ‖ u64 LE FNV-1a checksum of every preceding byte.
//!
//! The array manifest names each tensor with its canonical parameter-tree
//! name, so a load detects renamed or reordered fields instead of silently
//! misassigning data.

use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{ModelConfig, ModelParams};
use crate::training::{TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"SSVAECK1";
pub const CHECKPOINT_VERSION: u32 = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Streaming FNV-1a 64-bit hash.
struct Fnv1a(u64);

impl Fnv1a {
    fn new() -> Self {
        Fnv1a(FNV_OFFSET)
    }

    fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

/// FNV-1a digest of all parameter values in canonical order; two parameter
/// sets share a checksum exactly when their arrays are bit-identical.
pub fn params_checksum(params: &ModelParams) -> u64 {
    let mut h = Fnv1a::new();
    for (_, arr) in params.visit() {
        for &v in arr.iter() {
            h.update(&v.to_le_bytes());
        }
    }
    h.finish()
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    arrays: Vec<ArrayMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
}

/// A checkpoint read back from disk.
#[derive(Debug)]
pub struct SavedCheckpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: TrainState,
}

fn named_arrays(state: &TrainState) -> Vec<(String, &ArrayD<f64>)> {
    let mut out: Vec<(String, &ArrayD<f64>)> = state
        .params
        .visit()
        .into_iter()
        .map(|(n, a)| (n, a as _))
        .collect();
    out.extend(state.opt.m.visit().into_iter().map(|(n, a)| (format!("adam_m.{n}"), a as _)));
    out.extend(state.opt.v.visit().into_iter().map(|(n, a)| (format!("adam_v.{n}"), a as _)));
    out
}

pub fn save_checkpoint(
    path: &Path,
    model: &ModelConfig,
    train: &TrainConfig,
    state: &TrainState,
) -> Result<()> {
    let arrays = named_arrays(state);
    let header = Header {
        model: model.clone(),
        train: train.clone(),
        step: state.step,
        arrays: arrays
            .iter()
            .map(|(name, a)| ArrayMeta { name: name.clone(), shape: a.shape().to_vec() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let data_len: usize = arrays.iter().map(|(_, a)| a.len() * 8).sum();
    let mut buf = Vec::with_capacity(8 + 4 + 8 + header_bytes.len() + data_len + 8);
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, a) in &arrays {
        for &v in a.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut h = Fnv1a::new();
    h.update(&buf);
    buf.extend_from_slice(&h.finish().to_le_bytes());
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

pub fn load_checkpoint(path: &Path) -> Result<SavedCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 + 4 + 8 + 8 {
        return Err(corrupt(path, "file too short to be a checkpoint"));
    }
    if bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt(path, "bad magic (not a checkpoint file)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(
            path,
            format!("unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let body_end = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let mut h = Fnv1a::new();
    h.update(&bytes[..body_end]);
    if h.finish() != stored {
        return Err(corrupt(path, "checksum mismatch (corrupted file)"));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let data_start = 20 + header_len;
    if data_start > body_end {
        return Err(corrupt(path, "header length exceeds file size"));
    }
    let header: Header = serde_json::from_slice(&bytes[20..data_start])
        .map_err(|e| corrupt(path, format!("malformed header: {e}")))?;

    let mut state = TrainState::fresh(&header.model)?;
    state.step = header.step;
    let mut targets: Vec<(String, &mut ArrayD<f64>)> = state
        .params
        .visit_mut()
        .into_iter()
        .map(|(n, a)| (n, a as _))
        .collect();
    let (m, v) = state.opt.visit_mut();
    targets.extend(m.into_iter().map(|(n, a)| (format!("adam_m.{n}"), a as _)));
    targets.extend(v.into_iter().map(|(n, a)| (format!("adam_v.{n}"), a as _)));

    if header.arrays.len() != targets.len() {
        return Err(corrupt(
            path,
            format!("expected {} arrays, header lists {}", targets.len(), header.arrays.len()),
        ));
    }
    let mut offset = data_start;
    for (meta, (name, arr)) in header.arrays.iter().zip(targets) {
        if meta.name != name {
            return Err(corrupt(
                path,
                format!("parameter name mismatch: expected {name}, found {}", meta.name),
            ));
        }
        if meta.shape != arr.shape() {
            return Err(corrupt(
                path,
                format!("array {name}: shape {:?} does not match config ({:?})", meta.shape, arr.shape()),
            ));
        }
        let n = arr.len();
        let end = offset + 8 * n;
        if end > body_end {
            return Err(corrupt(path, "array data truncated"));
        }
        for (slot, chunk) in arr.iter_mut().zip(bytes[offset..end].chunks_exact(8)) {
            *slot = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        offset = end;
    }
    if offset != body_end {
        return Err(corrupt(path, "trailing bytes after array data"));
    }
    Ok(SavedCheckpoint { model: header.model, train: header.train, state })
}

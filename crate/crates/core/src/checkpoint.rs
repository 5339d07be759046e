//! Checkpoints: a JSON manifest of tensor names, shapes and byte offsets
//! next to a blob of little-endian `f32` values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Tensor;
use crate::detector::{ModelConfig, ModelParams};

pub const FORMAT: &str = "hiproto-checkpoint";
pub const VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
    #[error("tensor {name}: {reason}")]
    Tensor { name: String, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Byte length.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    /// Opaque training settings, kept for reference and resume checks.
    #[serde(default)]
    pub train: Option<serde_json::Value>,
    pub epoch: usize,
    pub step: usize,
    pub blob_len: usize,
    pub tensors: Vec<TensorEntry>,
}

/// Parameters plus optional optimizer state and progress counters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Momentum buffers in parameter order.
    pub momentum: Option<Vec<Tensor<f32>>>,
    pub train: Option<serde_json::Value>,
    pub epoch: usize,
    pub step: usize,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            momentum: None,
            train: None,
            epoch: 0,
            step: 0,
        }
    }

    /// Serializes to `(manifest JSON, blob)`.
    pub fn to_parts(&self) -> (String, Vec<u8>) {
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        let mut push = |name: String, t: &Tensor<f32>, blob: &mut Vec<u8>| {
            let offset = blob.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
                len: blob.len() - offset,
            });
        };
        for (name, t) in &self.params.tensors {
            push(name.clone(), t, &mut blob);
        }
        if let Some(m) = &self.momentum {
            for ((name, _), t) in self.params.tensors.iter().zip(m) {
                push(format!("{MOMENTUM_PREFIX}{name}"), t, &mut blob);
            }
        }
        let manifest = CheckpointManifest {
            format: FORMAT.into(),
            version: VERSION,
            model: self.params.config.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            step: self.step,
            blob_len: blob.len(),
            tensors: entries,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        (json, blob)
    }

    /// Parses and validates a manifest against its blob: every tensor the
    /// model needs must be present once with the right shape, byte ranges
    /// must lie inside the blob, and all values must be finite.
    pub fn from_parts(manifest: &str, blob: &[u8]) -> Result<Self, CheckpointError> {
        let m: CheckpointManifest = serde_json::from_str(manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(CheckpointError::Manifest(format!(
                "unsupported format {} v{}",
                m.format, m.version
            )));
        }
        if m.blob_len != blob.len() {
            return Err(CheckpointError::Manifest(format!(
                "blob has {} bytes, manifest says {}",
                blob.len(),
                m.blob_len
            )));
        }
        m.model.validate().map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let expected = m.model.param_shapes().map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let read = |e: &TensorEntry| -> Result<Tensor<f32>, CheckpointError> {
            let bad = |reason: String| CheckpointError::Tensor {
                name: e.name.clone(),
                reason,
            };
            let numel = e
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad("shape overflows".into()))?;
            if numel.checked_mul(4) != Some(e.len) {
                return Err(bad(format!("{} bytes for shape {:?}", e.len, e.shape)));
            }
            let end = e.offset.checked_add(e.len).filter(|&end| end <= blob.len());
            let Some(end) = end else {
                return Err(bad(format!("bytes {}+{} outside blob of {}", e.offset, e.len, blob.len())));
            };
            let data: Vec<f32> = blob[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite value".into()));
            }
            Tensor::new(e.shape.clone(), data).map_err(|err| bad(err.to_string()))
        };
        let find = |name: &str| -> Result<Option<&TensorEntry>, CheckpointError> {
            let mut hits = m.tensors.iter().filter(|e| e.name == name);
            let first = hits.next();
            if hits.next().is_some() {
                return Err(CheckpointError::Manifest(format!("tensor {name} listed twice")));
            }
            Ok(first)
        };
        let mut tensors = Vec::with_capacity(expected.len());
        let mut momentum = Vec::new();
        for (name, shape) in &expected {
            let e = find(name)?.ok_or_else(|| CheckpointError::Manifest(format!("missing tensor {name}")))?;
            if &e.shape != shape {
                return Err(CheckpointError::Tensor {
                    name: name.clone(),
                    reason: format!("shape {:?}, model needs {:?}", e.shape, shape),
                });
            }
            tensors.push((name.clone(), read(e)?));
            if let Some(me) = find(&format!("{MOMENTUM_PREFIX}{name}"))? {
                if &me.shape != shape {
                    return Err(CheckpointError::Tensor {
                        name: me.name.clone(),
                        reason: format!("shape {:?}, model needs {:?}", me.shape, shape),
                    });
                }
                momentum.push(read(me)?);
            }
        }
        if !momentum.is_empty() && momentum.len() != expected.len() {
            return Err(CheckpointError::Manifest("momentum buffers are incomplete".into()));
        }
        let known = expected.len() + momentum.len();
        if m.tensors.len() != known {
            return Err(CheckpointError::Manifest(format!(
                "{} tensors listed, {} recognised",
                m.tensors.len(),
                known
            )));
        }
        Ok(Self {
            params: ModelParams {
                config: m.model,
                tensors,
            },
            momentum: (!momentum.is_empty()).then_some(momentum),
            train: m.train,
            epoch: m.epoch,
            step: m.step,
        })
    }

    /// Writes `<stem>.json` and `<stem>.bin`.
    pub fn save(&self, stem: &Path) -> Result<(), CheckpointError> {
        let (json, blob) = self.to_parts();
        if let Some(dir) = stem.parent() {
            fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        let (jp, bp) = paths(stem);
        fs::write(&jp, json).map_err(|source| CheckpointError::Io { path: jp, source })?;
        fs::write(&bp, blob).map_err(|source| CheckpointError::Io { path: bp, source })
    }

    /// Loads from a `.json` path or the shared stem of the pair.
    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let stem = if path.extension().is_some_and(|e| e == "json" || e == "bin") {
            path.with_extension("")
        } else {
            path.to_path_buf()
        };
        let (jp, bp) = paths(&stem);
        let json = fs::read_to_string(&jp).map_err(|source| CheckpointError::Io { path: jp, source })?;
        let blob = fs::read(&bp).map_err(|source| CheckpointError::Io { path: bp, source })?;
        Self::from_parts(&json, &blob)
    }
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_owned();
    let mut j = s.clone();
    j.push(".json");
    let mut b = s;
    b.push(".bin");
    (PathBuf::from(j), PathBuf::from(b))
}

//! Binary checkpoint: 8-byte magic, little-endian `u32` metadata length,
//! JSON metadata, then every parameter as little-endian `f32` in
//! registration order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use spt_autograd::Rng;
use thiserror::Error;

use crate::material::{Dataset, GridSpec, NormStats, Split};
use crate::model::{ModelConfig, Seq2Seq};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"SPT2SS01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic(Vec<u8>),

    #[error("unsupported checkpoint version {found} (this build reads {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated {section}: expected {expected} bytes, found {actual}")]
    Truncated {
        section: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("payload has {0} trailing bytes")]
    TrailingBytes(usize),

    #[error("parameter `{name}`: checkpoint shape {stored:?} does not match model shape {model:?}")]
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        model: Vec<usize>,
    },

    #[error("parameter list differs from the model ({stored} stored, {model} expected)")]
    ParamCount { stored: usize, model: usize },

    #[error("invalid metadata: {0}")]
    Metadata(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub params: Vec<ParamInfo>,
    pub norm_stats: NormStats,
    pub grid: GridSpec,
    pub final_epoch: usize,
    pub final_loss: f64,
    pub train_split: Split,
    pub train_samples: usize,
    pub dataset_seed: Option<u64>,
    /// Free-form provenance supplied by the caller (paths, command line).
    #[serde(default)]
    pub provenance: serde_json::Map<String, serde_json::Value>,
}

impl CheckpointMeta {
    pub fn new(train_config: TrainConfig, model: &Seq2Seq, ds: &Dataset, final_epoch: usize, final_loss: f64) -> Self {
        let store = model.params();
        Self {
            format_version: FORMAT_VERSION,
            train_config,
            model_config: *model.config(),
            params: store
                .names()
                .iter()
                .zip(store.tensors())
                .map(|(n, t)| ParamInfo {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            norm_stats: ds.norm_stats,
            grid: ds.grid,
            final_epoch,
            final_loss,
            train_split: ds.split,
            train_samples: ds.len(),
            dataset_seed: ds.seed,
            provenance: Default::default(),
        }
    }

    fn payload_values(&self) -> usize {
        self.params.iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    values: Vec<f32>,
}

impl Checkpoint {
    pub fn from_model(meta: CheckpointMeta, model: &Seq2Seq) -> Result<Self, CheckpointError> {
        let values: Vec<f32> = model.params().flatten().iter().map(|&v| v as f32).collect();
        if values.len() != meta.payload_values() {
            return Err(CheckpointError::ParamCount {
                stored: meta.payload_values(),
                model: values.len(),
            });
        }
        Ok(Self { meta, values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let take = |from: usize, len: usize, section: &'static str| {
            bytes.get(from..from + len).ok_or(CheckpointError::Truncated {
                section,
                expected: len,
                actual: bytes.len().saturating_sub(from),
            })
        };
        let magic = take(0, 8, "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic.to_vec()));
        }
        let meta_len = u32::from_le_bytes(take(8, 4, "header")?.try_into().expect("4 bytes")) as usize;
        let meta_bytes = take(12, meta_len, "metadata")?;
        let value: serde_json::Value =
            serde_json::from_slice(meta_bytes).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| CheckpointError::Metadata("missing format_version".into()))?;
        if found != u64::from(FORMAT_VERSION) {
            return Err(CheckpointError::VersionMismatch {
                expected: FORMAT_VERSION,
                found: found as u32,
            });
        }
        let meta: CheckpointMeta =
            serde_json::from_value(value).map_err(|e| CheckpointError::Metadata(e.to_string()))?;

        let start = 12 + meta_len;
        let expected = 4 * meta.payload_values();
        let actual = bytes.len() - start;
        if actual < expected {
            return Err(CheckpointError::Truncated {
                section: "payload",
                expected,
                actual,
            });
        }
        if actual > expected {
            return Err(CheckpointError::TrailingBytes(actual - expected));
        }
        let values = bytes[start..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { meta, values })
    }

    pub fn save(&self, path: &Path) -> crate::Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| crate::SptError::io(path, e))
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| crate::SptError::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    /// Rebuilds the model and checks every stored name and shape against it.
    pub fn to_model(&self) -> crate::Result<Seq2Seq> {
        let mut model = Seq2Seq::new(self.meta.model_config, &mut Rng::new(0))?;
        let store = model.params();
        if store.len() != self.meta.params.len() {
            return Err(CheckpointError::ParamCount {
                stored: self.meta.params.len(),
                model: store.len(),
            }
            .into());
        }
        for ((info, name), t) in self.meta.params.iter().zip(store.names()).zip(store.tensors()) {
            if &info.name != name || info.shape != t.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: info.name.clone(),
                    stored: info.shape.clone(),
                    model: t.shape().to_vec(),
                }
                .into());
            }
        }
        let values: Vec<f64> = self.values.iter().map(|&v| f64::from(v)).collect();
        model.params_mut().load_flat(&values)?;
        Ok(model)
    }
}

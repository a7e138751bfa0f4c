//! Encoder checkpoints as versioned JSON.
//!
//! ```json
//! {
//!   "format": "nps-checkpoint",
//!   "version": 1,
//!   "config": { "order": 64, "hidden": 256, "length": 16, "tau": 1.0, "soft_feedback": false },
//!   "meta": { "iteration": 20000, "launch_dbm": 10.0, "seed": 1 },
//!   "tensors": [ { "name": "w_ih", "shape": [64, 1024], "data": [ ... ] }, ... ]
//! }
//! ```
//!
//! Floats are written in shortest round-trip form, so loading restores the
//! parameters bit for bit.

use std::fs;
use std::path::Path;

use nps_core::autodiff::Tensor;
use nps_core::encoder::{EncoderConfig, EncoderModel, PARAM_NAMES};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{NpsError, Result};

pub const FORMAT: &str = "nps-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub iteration: usize,
    pub launch_dbm: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigBlock {
    order: usize,
    hidden: usize,
    length: usize,
    tau: f64,
    soft_feedback: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorBlock {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct File {
    format: String,
    version: u32,
    config: ConfigBlock,
    #[serde(default)]
    meta: CheckpointMeta,
    tensors: Vec<TensorBlock>,
}

pub fn to_json(model: &EncoderModel, meta: &CheckpointMeta) -> String {
    let c = model.config();
    let file = File {
        format: FORMAT.into(),
        version: VERSION,
        config: ConfigBlock {
            order: c.order,
            hidden: c.hidden,
            length: c.length,
            tau: c.tau,
            soft_feedback: c.soft_feedback,
        },
        meta: meta.clone(),
        tensors: model
            .tensors()
            .iter()
            .zip(PARAM_NAMES)
            .map(|(t, name)| TensorBlock {
                name: name.into(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    serde_json::to_string(&file).expect("checkpoint serialises")
}

pub fn from_json(text: &str, path: &Path) -> Result<(EncoderModel, CheckpointMeta)> {
    let file: File = serde_json::from_str(text).map_err(|e| NpsError::format(path, e.to_string()))?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(NpsError::format(path, format!("unsupported format {} v{}", file.format, file.version)));
    }
    let cfg = EncoderConfig {
        order: file.config.order,
        hidden: file.config.hidden,
        length: file.config.length,
        tau: file.config.tau,
        soft_feedback: file.config.soft_feedback,
    };
    if file.tensors.len() != PARAM_NAMES.len() {
        return Err(NpsError::format(path, "expected five tensors"));
    }
    let mut tensors = Vec::with_capacity(5);
    for (t, name) in file.tensors.into_iter().zip(PARAM_NAMES) {
        if t.name != name {
            return Err(NpsError::format(path, format!("expected tensor {name}, found {}", t.name)));
        }
        tensors.push(Tensor::new(&t.shape, t.data).map_err(|e| NpsError::format(path, e.to_string()))?);
    }
    let model = EncoderModel::from_tensors(cfg, tensors).map_err(|e| NpsError::format(path, e.to_string()))?;
    Ok((model, file.meta))
}

pub fn save(path: &Path, model: &EncoderModel, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, to_json(model, meta)).map_err(|e| NpsError::io(path, e))
}

pub fn load(path: &Path) -> Result<(EncoderModel, CheckpointMeta)> {
    let text = fs::read_to_string(path).map_err(|e| NpsError::io(path, e))?;
    from_json(&text, path)
}

/// SHA-256 over the configuration and the raw parameter bits.
pub fn model_hash(model: &EncoderModel) -> [u8; 32] {
    let c = model.config();
    let mut h = Sha256::new();
    h.update(b"nps-model-v1");
    for v in [c.order as u64, c.hidden as u64, c.length as u64] {
        h.update(v.to_le_bytes());
    }
    h.update(c.tau.to_le_bytes());
    h.update([c.soft_feedback as u8]);
    for t in model.tensors() {
        h.update((t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

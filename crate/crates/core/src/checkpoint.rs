//! Single-file checkpoint: magic, a length-prefixed JSON header, then the
//! named tensors in header order, each in the raw tensor container format.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{MmdaError, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor_io::RawTensor;
use crate::trainer::{AdamState, StepLog, TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MMDACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Random state. Every draw derives from `seed` plus the epoch or step
/// counter, so these two numbers pin the stream position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
    pub next_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config_hash: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub adam_t: u64,
    pub rng: RngState,
    pub history: Vec<StepLog>,
    pub tensors: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub state: TrainState,
}

fn collect_tensors(state: &TrainState) -> Vec<(String, Array2<f64>)> {
    let mut out = state.model.named_tensors();
    for (name, (m, v)) in state
        .model
        .store
        .names()
        .iter()
        .zip(state.adam.m.iter().zip(&state.adam.v))
    {
        out.push((format!("adam.m.{name}"), m.clone()));
        out.push((format!("adam.v.{name}"), v.clone()));
    }
    out
}

pub fn encode(state: &TrainState, train: &TrainConfig, config_hash: &str) -> Result<Vec<u8>> {
    let tensors = collect_tensors(state);
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config_hash: config_hash.to_owned(),
        model: state.model.config.clone(),
        train: train.clone(),
        epoch: state.epoch,
        step: state.step,
        adam_t: state.adam.t,
        rng: RngState {
            seed: train.seed,
            next_epoch: state.epoch,
            next_step: state.step,
        },
        history: state.history.clone(),
        tensors: tensors.iter().map(|(n, _)| n.clone()).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&u32::try_from(json.len()).map_err(|_| MmdaError::format("header too large"))?.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        out.extend(RawTensor::from_array2(t).encode()?);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(MmdaError::format("not a checkpoint file"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + len).ok_or_else(|| MmdaError::format("truncated checkpoint header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| MmdaError::format(format!("checkpoint header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(MmdaError::format(format!("unsupported checkpoint version {}", header.version)));
    }
    let mut pos = 12 + len;
    let mut named = Vec::with_capacity(header.tensors.len());
    for name in &header.tensors {
        let (t, used) = RawTensor::decode_prefix(&bytes[pos..])?;
        named.push((name.clone(), t.to_array2()?));
        pos += used;
    }
    if pos != bytes.len() {
        return Err(MmdaError::format("trailing bytes after checkpoint tensors"));
    }
    let mut model = Model::init(&header.model, header.train.seed)?;
    model.load_tensors(&named)?;
    let lookup = |prefix: &str| -> Result<Vec<Array2<f64>>> {
        model
            .store
            .names()
            .iter()
            .zip(model.store.values())
            .map(|(n, p)| {
                let key = format!("{prefix}{n}");
                let (_, t) = named
                    .iter()
                    .find(|(k, _)| *k == key)
                    .ok_or_else(|| MmdaError::format(format!("checkpoint lacks {key}")))?;
                if t.dim() != p.dim() {
                    return Err(MmdaError::validation(format!("{key} has the wrong shape")));
                }
                Ok(t.clone())
            })
            .collect()
    };
    let adam = AdamState {
        t: header.adam_t,
        m: lookup("adam.m.")?,
        v: lookup("adam.v.")?,
    };
    let state = TrainState {
        model,
        adam,
        epoch: header.epoch,
        step: header.step,
        history: header.history.clone(),
    };
    Ok(Checkpoint { header, state })
}

pub fn save(path: &Path, state: &TrainState, train: &TrainConfig, config_hash: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| MmdaError::io(dir, e))?;
    }
    fs::write(path, encode(state, train, config_hash)?).map_err(|e| MmdaError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| MmdaError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::udsa::UdsaConfig;

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = ModelConfig {
            n_d: 8,
            udsa: UdsaConfig {
                depth: 1,
                ..UdsaConfig::default()
            },
            md2a: crate::md2a::Md2aConfig {
                n_heads: 2,
                ..Default::default()
            },
            ..ModelConfig::default()
        };
        let mut state = TrainState::new(Model::init(&cfg, 4).unwrap());
        state.adam.m[0][[0, 0]] = 0.1 + 0.2;
        state.history.push(StepLog {
            epoch: 0,
            step: 0,
            total: 0.7,
            l_cls: 0.3,
            l_align: 0.4,
        });
        let train = TrainConfig::default();
        let a = encode(&state, &train, "h").unwrap();
        let back = decode(&a).unwrap();
        let b = encode(&back.state, &back.header.train, &back.header.config_hash).unwrap();
        assert_eq!(a, b);
        assert!(decode(&a[..a.len() - 1]).is_err());
    }
}

//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header describing every tensor plus the scalar state, then all tensor
//! values as little-endian `f64` in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ParamStore};
use crate::optim::{RAdam, RAdamConfig};
use crate::pseudo::ThresholdState;

const MAGIC: &[u8; 8] = b"XCORPCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    tensors: Vec<Entry>,
    threshold: ThresholdState,
    rng: ChaCha8Rng,
    step: u64,
    epoch: u64,
    batch_in_epoch: usize,
    target_rows_seen: u64,
    optim_config: RAdamConfig,
    optim_step: u64,
}

fn vectors(m: &BTreeMap<String, ndarray::Array1<f64>>) -> Vec<(&String, Tensor)> {
    m.iter().map(|(k, v)| (k, v.clone().into_dyn())).collect()
}

fn tensors(m: &BTreeMap<String, Tensor>) -> Vec<(&String, Tensor)> {
    m.iter().map(|(k, v)| (k, v.clone())).collect()
}

fn groups(state: &TrainState) -> Vec<(&'static str, Vec<(&String, Tensor)>)> {
    vec![
        ("param", tensors(&state.model.store.params)),
        ("buffer", vectors(&state.model.store.buffers)),
        ("adam_m", tensors(&state.optim.first)),
        ("adam_v", tensors(&state.optim.second)),
    ]
}

/// Writes `state` together with the configuration that produced it.
pub fn save_checkpoint(state: &TrainState, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    for (group, items) in groups(state) {
        for (name, t) in items {
            tensors.push(Entry { group: group.into(), name: name.clone(), shape: t.shape().to_vec() });
            for v in t.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = Header {
        config: cfg.clone(),
        tensors,
        threshold: state.threshold,
        rng: state.rng.clone(),
        step: state.step,
        epoch: state.epoch,
        batch_in_epoch: state.batch_in_epoch,
        target_rows_seen: state.target_rows_seen,
        optim_config: state.optim.config,
        optim_step: state.optim.step,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    let mut bytes = Vec::with_capacity(20 + json.len() + blob.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&blob);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Restores a state and its configuration.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: &str| Error::CorruptCheckpoint { path: path.to_path_buf(), reason: reason.into() };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { path: path.to_path_buf(), found: version, expected: CHECKPOINT_VERSION });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if hlen > body.len() {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::json(path, e))?;
    let mut blob = body[hlen..].chunks_exact(8);
    if blob.remainder().len() != 0 {
        return Err(corrupt("tensor data is not a whole number of f64 values"));
    }

    let mut store = ParamStore::default();
    let mut optim = RAdam::new(header.optim_config);
    optim.step = header.optim_step;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let c = blob.next().ok_or_else(|| corrupt("truncated tensor data"))?;
            vals.push(f64::from_le_bytes(c.try_into().unwrap()));
        }
        let t = ArrayD::from_shape_vec(IxDyn(&e.shape), vals).map_err(|_| corrupt("bad tensor shape"))?;
        let slot = match e.group.as_str() {
            "param" => &mut store.params,
            "adam_m" => &mut optim.first,
            "adam_v" => &mut optim.second,
            "buffer" => {
                let v = t.into_dimensionality().map_err(|_| corrupt("buffer is not a vector"))?;
                store.buffers.insert(e.name.clone(), v);
                continue;
            }
            other => return Err(corrupt(&format!("unknown tensor group `{other}`"))),
        };
        slot.insert(e.name.clone(), t);
    }
    if blob.next().is_some() {
        return Err(corrupt("trailing tensor data"));
    }

    let reference = Model::init(header.config.model.clone(), 0)?;
    let shapes = |m: &BTreeMap<String, Tensor>| m.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect::<Vec<_>>();
    if shapes(&reference.store.params) != shapes(&store.params)
        || reference.store.buffers.keys().ne(store.buffers.keys())
    {
        return Err(corrupt("parameter set does not match the stored model configuration"));
    }

    let state = TrainState {
        model: Model { config: header.config.model.clone(), store },
        optim,
        threshold: header.threshold,
        step: header.step,
        epoch: header.epoch,
        batch_in_epoch: header.batch_in_epoch,
        rng: header.rng,
        target_rows_seen: header.target_rows_seen,
    };
    Ok((state, header.config))
}

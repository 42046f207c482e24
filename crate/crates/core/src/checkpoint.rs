//! Single-file checkpoints.
//!
//! Layout: `b"BSRCKPT"`, a format version byte, a little-endian `u64` header
//! length, a JSON header, then raw little-endian tensor data in header order.
//! The header carries no timestamps, so equal states give equal bytes.

use std::path::Path;

use blindsr_tensor::{Adam, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::training::{Stage, TrainState};

pub const MAGIC: &[u8; 7] = b"BSRCKPT";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dtype: String,
    pub arch_hash: String,
    pub config: RunConfig,
    pub stage: Stage,
    pub epoch: usize,
    pub step: u64,
    pub trained: Vec<String>,
    pub optimizer_step: u64,
    pub tensors: Vec<TensorEntry>,
}

fn element_size(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn push_le<S: Scalar>(out: &mut Vec<u8>, t: &Tensor<S>) {
    for v in t.data() {
        match S::DTYPE {
            "f32" => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            _ => out.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
}

/// Serialises a training state.
pub fn to_bytes<S: Scalar>(state: &TrainState<S>) -> Result<Vec<u8>> {
    let store = &state.model.store;
    let params = store.iter().map(|(_, p)| (p.name.clone(), &p.value));
    let m = store.iter().zip(&state.optimizer.m).map(|((_, p), t)| (format!("adam.m.{}", p.name), t));
    let v = store.iter().zip(&state.optimizer.v).map(|((_, p), t)| (format!("adam.v.{}", p.name), t));
    let sections: Vec<(String, &Tensor<S>)> = params.chain(m).chain(v).collect();
    let mut offset = 0;
    let tensors = sections
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
            offset += t.len();
            e
        })
        .collect();
    let header = Header {
        dtype: S::DTYPE.to_string(),
        arch_hash: state.run.model.arch_hash(),
        config: state.run.clone(),
        stage: state.stage,
        epoch: state.epoch,
        step: state.step,
        trained: state.trained.clone(),
        optimizer_step: state.optimizer.step,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset * element_size(S::DTYPE)?);
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in sections {
        push_le(&mut out, t);
    }
    Ok(out)
}

/// Parses only the header.
pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 16 || &bytes[..7] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    if bytes[7] != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", bytes[7])));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..end])?;
    Ok((header, end))
}

fn read_tensor<S: Scalar>(data: &[u8], entry: &TensorEntry, elem: usize) -> Result<Tensor<S>> {
    let n: usize = entry.shape.iter().product();
    let start = entry.offset * elem;
    let end = start + n * elem;
    if end > data.len() {
        return Err(Error::Checkpoint(format!("truncated data for {}", entry.name)));
    }
    let vals = data[start..end]
        .chunks_exact(elem)
        .map(|c| {
            let v = if elem == 4 {
                f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64
            } else {
                f64::from_le_bytes(c.try_into().expect("8 bytes"))
            };
            S::from_f64_lossy(v)
        })
        .collect();
    Ok(Tensor::new(entry.shape.clone(), vals))
}

/// Rebuilds a training state. The stored architecture hash must match the
/// stored config, and the dtype must match `S`.
pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<TrainState<S>> {
    let (header, data_start) = read_header(bytes)?;
    if header.dtype != S::DTYPE {
        return Err(Error::Checkpoint(format!("checkpoint holds {} values, expected {}", header.dtype, S::DTYPE)));
    }
    if header.config.model.arch_hash() != header.arch_hash {
        return Err(Error::Checkpoint(format!(
            "architecture hash mismatch: header {} vs config {}",
            header.arch_hash,
            header.config.model.arch_hash()
        )));
    }
    let elem = element_size(&header.dtype)?;
    let data = &bytes[data_start..];
    let mut model = Model::<S>::new(&header.config.model, 0)?;
    let mut optimizer = Adam::new(Default::default(), &model.store);
    optimizer.config.beta1 = header.config.train.adam_betas[0];
    optimizer.config.beta2 = header.config.train.adam_betas[1];
    optimizer.step = header.optimizer_step;
    let by_name: std::collections::HashMap<&str, &TensorEntry> =
        header.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let expected = 3 * model.store.len();
    if header.tensors.len() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, architecture needs {expected}",
            header.tensors.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let name = model.store.name(id).to_string();
        let shape = model.store.get(id).shape().to_vec();
        for (prefix, target) in [("", 0), ("adam.m.", 1), ("adam.v.", 2)] {
            let key = format!("{prefix}{name}");
            let entry = by_name.get(key.as_str()).ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if entry.shape != shape {
                return Err(Error::Checkpoint(format!("{key}: stored shape {:?}, expected {shape:?}", entry.shape)));
            }
            let t = read_tensor(data, entry, elem)?;
            match target {
                0 => *model.store.get_mut(id) = t,
                1 => optimizer.m[i] = t,
                _ => optimizer.v[i] = t,
            }
        }
    }
    Ok(TrainState {
        run: header.config,
        model,
        optimizer,
        stage: header.stage,
        epoch: header.epoch,
        step: header.step,
        trained: header.trained,
    })
}

pub fn save<S: Scalar>(state: &TrainState<S>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(state)?).map_err(|e| Error::io(path, e))
}

pub fn load<S: Scalar>(path: &Path) -> Result<TrainState<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Loads and checks that the architecture equals `expected`.
pub fn load_expecting<S: Scalar>(path: &Path, expected: &RunConfig) -> Result<TrainState<S>> {
    let state = load::<S>(path)?;
    let (want, got) = (expected.model.arch_hash(), state.run.model.arch_hash());
    if want != got {
        return Err(Error::Checkpoint(format!(
            "{}: architecture {got} does not match the configured architecture {want}",
            path.display()
        )));
    }
    Ok(state)
}

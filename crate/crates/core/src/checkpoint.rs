//! Binary checkpoints.
//!
//! Layout: an 8-byte little-endian header length, a JSON header, then every
//! parameter block followed by the two Adam moment vectors of each block, all
//! as little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SegmentationModel};
use crate::trainer::{Adam, TrainConfig, TrainState};

pub const FORMAT: &str = "actseg-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
    /// Offset in `f32` elements from the start of the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Hex SHA-256 of the JSON-serialized model config.
    pub config_hash: String,
    pub iteration: usize,
    pub adam_step: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn config_hash(config: &ModelConfig) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob: Vec<f32> = Vec::new();
    let blocks = state.model.blocks();
    let mut push = |name: String, v: &[f32], tensors: &mut Vec<TensorEntry>| {
        tensors.push(TensorEntry {
            name,
            len: v.len(),
            offset: blob.len(),
        });
        blob.extend_from_slice(v);
    };
    for (name, v) in &blocks {
        push(name.clone(), v, &mut tensors);
    }
    for ((name, _), (m, v)) in blocks
        .iter()
        .zip(state.optimizer.m.iter().zip(&state.optimizer.v))
    {
        push(format!("adam.m.{name}"), m, &mut tensors);
        push(format!("adam.v.{name}"), v, &mut tensors);
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        model: state.model.config.clone(),
        train: state.config.clone(),
        config_hash: config_hash(&state.model.config)?,
        iteration: state.iteration,
        adam_step: state.optimizer.step,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * blob.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for x in blob {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 8 {
        return Err(format_err("checkpoint is shorter than its length prefix"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..).expect("checked");
    if hlen > body.len() {
        return Err(format_err(format!(
            "header length {hlen} exceeds file size"
        )));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| format_err(format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(format_err(format!(
            "unsupported checkpoint {} v{}",
            header.format, header.version
        )));
    }
    if config_hash(&header.model)? != header.config_hash {
        return Err(format_err("config hash does not match the stored config"));
    }
    let raw = &body[hlen..];
    if raw.len() % 4 != 0 {
        return Err(format_err("blob is not a whole number of f32 values"));
    }
    let blob: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
        .collect();

    let mut model = SegmentationModel::<f32>::zeros(header.model.clone())
        .map_err(|e| format_err(e.to_string()))?;
    let mut optimizer = Adam::new(&model);
    optimizer.step = header.adam_step;
    let names: Vec<String> = model.blocks().into_iter().map(|(n, _)| n).collect();
    let expected: Vec<String> = names
        .iter()
        .cloned()
        .chain(
            names
                .iter()
                .flat_map(|n| [format!("adam.m.{n}"), format!("adam.v.{n}")]),
        )
        .collect();
    if header.tensors.iter().map(|t| &t.name).ne(expected.iter()) {
        return Err(format_err("tensor list does not match the model layout"));
    }
    let mut slices = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let s = blob
            .get(t.offset..t.offset + t.len)
            .ok_or_else(|| format_err(format!("tensor {} lies outside the blob", t.name)))?;
        slices.push(s);
    }
    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    if total != blob.len() {
        return Err(format_err(format!(
            "blob holds {} values, header describes {total}",
            blob.len()
        )));
    }
    let n = names.len();
    for (k, (name, dst)) in model.blocks_mut().into_iter().enumerate() {
        if dst.len() != slices[k].len() {
            return Err(format_err(format!(
                "{name} has {} values, expected {}",
                slices[k].len(),
                dst.len()
            )));
        }
        dst.copy_from_slice(slices[k]);
        for (which, moments) in [(0, &mut optimizer.m[k]), (1, &mut optimizer.v[k])] {
            let s = slices[n + 2 * k + which];
            if s.len() != moments.len() {
                return Err(format_err(format!(
                    "Adam moments of {name} have the wrong length"
                )));
            }
            moments.copy_from_slice(s);
        }
    }
    Ok(TrainState {
        model,
        optimizer,
        config: header.train,
        iteration: header.iteration,
    })
}

pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    fs::write(path, encode(state)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

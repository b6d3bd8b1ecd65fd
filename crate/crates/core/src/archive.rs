// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary tensor archive.
//!
//! Layout:
//!
//! ```text
//! b"SSMKO1"
//! u64 little-endian header length
//! UTF-8 JSON header:
//!   { "__metadata__": {...},
//!     "<name>": {"dtype": "f32"|"f64", "shape": [..], "offset": <bytes from payload start>}, ... }
//! raw little-endian payloads
//! ```
//!
//! Tensors are laid out in name order. `f32` payloads are promoted to `f64`
//! on load.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, ModelWeights};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 6] = b"SSMKO1";
const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorArchive {
    pub metadata: Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl TensorArchive {
    pub fn to_bytes(&self, dtype: DType) -> Result<Vec<u8>> {
        let mut header = Map::new();
        header.insert(METADATA_KEY.into(), self.metadata.clone());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            if name == METADATA_KEY {
                return Err(Error::Archive(format!("reserved tensor name {name}")));
            }
            let entry = Entry {
                dtype,
                shape: t.shape().to_vec(),
                offset,
            };
            header.insert(name.clone(), serde_json::to_value(entry)?);
            offset += t.len() * dtype.width();
        }
        let header = serde_json::to_vec(&Value::Object(header))?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for &v in t.data() {
                match dtype {
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Archive("missing SSMKO1 magic".into()));
        }
        let mut len_bytes = [0u8; 8];
        len_bytes.copy_from_slice(&bytes[6..14]);
        let header_len = usize::try_from(u64::from_le_bytes(len_bytes))
            .map_err(|_| Error::Archive("header length overflow".into()))?;
        let header_end = 14usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Archive("truncated header".into()))?;
        let header: Map<String, Value> = serde_json::from_slice(&bytes[14..header_end])?;
        let payload = &bytes[header_end..];
        let mut archive = TensorArchive::default();
        for (name, value) in header {
            if name == METADATA_KEY {
                archive.metadata = value;
                continue;
            }
            let entry: Entry = serde_json::from_value(value)?;
            let n: usize = entry.shape.iter().product();
            let w = entry.dtype.width();
            let end = entry
                .offset
                .checked_add(n * w)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| Error::Archive(format!("tensor {name} runs past payload")))?;
            let raw = &payload[entry.offset..end];
            let data = match entry.dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| {
                        let mut b = [0u8; 8];
                        b.copy_from_slice(c);
                        f64::from_le_bytes(b)
                    })
                    .collect(),
            };
            archive.tensors.insert(name, Tensor::new(entry.shape, data)?);
        }
        Ok(archive)
    }

    pub fn write(&self, path: &Path, dtype: DType) -> Result<()> {
        std::fs::write(path, self.to_bytes(dtype)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Packs model weights, with the model spec stored under metadata.
pub fn model_to_archive(weights: &ModelWeights) -> Result<TensorArchive> {
    let mut meta = Map::new();
    meta.insert("model_spec".into(), serde_json::to_value(&weights.spec)?);
    Ok(TensorArchive {
        metadata: Value::Object(meta),
        tensors: weights
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect(),
    })
}

pub fn model_from_archive(archive: &TensorArchive) -> Result<ModelWeights> {
    let spec_value = archive
        .metadata
        .get("model_spec")
        .ok_or_else(|| Error::Archive("metadata lacks model_spec".into()))?;
    let spec: ModelSpec = serde_json::from_value(spec_value.clone())?;
    let mut weights = ModelWeights::zeros(&spec)?;
    let mut seen = 0;
    for (name, slot) in weights.named_params_mut() {
        let t = archive
            .tensors
            .get(&name)
            .ok_or_else(|| Error::Archive(format!("missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Archive(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
        seen += 1;
    }
    if seen != archive.tensors.len() {
        return Err(Error::Archive(format!(
            "{} unexpected tensors in archive",
            archive.tensors.len() - seen
        )));
    }
    Ok(weights)
}

pub fn save_model(weights: &ModelWeights, path: &Path) -> Result<()> {
    model_to_archive(weights)?.write(path, DType::F64)
}

pub fn load_model(path: &Path) -> Result<ModelWeights> {
    model_from_archive(&TensorArchive::read(path)?)
}

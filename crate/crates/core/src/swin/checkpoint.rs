//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | content                                   |
//! |--------|------|-------------------------------------------|
//! | 0      | 8    | magic `SWFCKPT\0`                         |
//! | 8      | 4    | format version (`1`)                      |
//! | 12     | 8    | header length `H` in bytes                |
//! | 20     | H    | UTF-8 JSON [`CheckpointHeader`]           |
//! | 20 + H | ..   | tensor payloads, raw little-endian values |
//!
//! Each directory entry's `offset` is relative to the start of the payload
//! region.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::SwinConfig;
use super::model::shape_diff;
use super::weights::{ModelParams, ParamTree};
use crate::error::{Error, Result};
use crate::tensor::{DType, Float, Tensor};

const MAGIC: &[u8; 8] = b"SWFCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: SwinConfig,
    /// Free-form run metadata (color frame, epoch, ...).
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint<T: Float>(
    path: &Path,
    config: &SwinConfig,
    meta: &BTreeMap<String, String>,
    params: &ModelParams<T>,
) -> Result<()> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in params.named() {
        tensors.push(TensorEntry {
            name,
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let header = CheckpointHeader { config: config.clone(), meta: meta.clone(), tensors };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&out)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a swinforge checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(20..20 + len)
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| Error::Format(e.to_string()))?;
    Ok((header, &bytes[20 + len..]))
}

/// Reads only the header (config, metadata, directory).
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path)?;
    Ok(read_header(&bytes)?.0)
}

/// Loads a checkpoint, converting values to `T`. With `expected` given, the
/// stored tensors must match its shapes exactly.
pub fn load_checkpoint<T: Float>(
    path: &Path,
    expected: Option<&SwinConfig>,
) -> Result<(CheckpointHeader, ModelParams<T>)> {
    let bytes = fs::read(path)?;
    let (header, payload) = read_header(&bytes)?;
    let config = expected.unwrap_or(&header.config);
    let template = ModelParams::<T>::init(config, 0)?;
    let found: Vec<(String, Vec<usize>)> =
        header.tensors.iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
    let diffs = shape_diff(&template, &found);
    if !diffs.is_empty() {
        return Err(Error::Mismatch(diffs.join("; ")));
    }
    let params = template.try_map::<Tensor<T>, Error>("", &mut |name, t| {
        let entry = header.tensors.iter().find(|e| e.name == name).expect("checked by shape_diff");
        let size = entry.dtype.size();
        let start = entry.offset as usize;
        let end = start + t.len() * size;
        let raw = payload
            .get(start..end)
            .ok_or_else(|| Error::Format(format!("payload of {name} is truncated")))?;
        let data: Vec<T> = match entry.dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::of(f64::from(f32::read_le(c)))).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
        };
        Tensor::new(entry.shape.clone(), data)
    })?;
    Ok((header, params))
}

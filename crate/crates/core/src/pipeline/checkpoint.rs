//! Self-describing named-tensor files.
//!
//! Layout: `UPCK` · version `u32` LE · header length `u64` LE · UTF-8 JSON
//! header `{"meta": …, "tensors": [{name, dtype, shape, offset}]}` · raw
//! little-endian `f32` data, contiguous in header order, offsets relative to
//! the start of the data section.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::expansion::Provenance;
use crate::model::{DenseModel, ModelConfig, MoeLayout, MoeModel};
use crate::numerics::Tensor;
use crate::training::CheckpointMeta;

pub const MAGIC: &[u8; 4] = b"UPCK";
pub const VERSION: u32 = 1;
const PREFIX: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Dense,
    Moe,
    RoutingVectors,
}

/// Everything stored in the `meta` object of a checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointInfo {
    pub kind: ModelKind,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoeLayout>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<CheckpointMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl CheckpointInfo {
    pub fn dense(model: &ModelConfig) -> Self {
        CheckpointInfo {
            kind: ModelKind::Dense,
            model: model.clone(),
            moe: None,
            train: None,
            provenance: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn moe(model: &ModelConfig, layout: MoeLayout) -> Self {
        CheckpointInfo {
            kind: ModelKind::Moe,
            moe: Some(layout),
            ..Self::dense(model)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: CheckpointInfo,
    tensors: Vec<TensorEntry>,
}

/// Serializes `tensors` (narrowed to `f32`) in the given order.
pub fn encode(info: &CheckpointInfo, tensors: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.numel() as u64;
    }
    let header = serde_json::to_vec(&Header {
        meta: info.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(PREFIX + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a checkpoint, widening every value back to `f64`.
pub fn decode(bytes: &[u8]) -> Result<(CheckpointInfo, Vec<(String, Tensor)>)> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated("file shorter than the magic".into()).into());
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    if bytes.len() < PREFIX {
        return Err(CheckpointError::Truncated("file shorter than the fixed prefix".into()).into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let data_start = (PREFIX as u64)
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| CheckpointError::Truncated(format!("header of {header_len} bytes")))?
        as usize;
    let header: Header = serde_json::from_slice(&bytes[PREFIX..data_start])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let data = &bytes[data_start..];

    let mut expected = 0u64;
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(CheckpointError::Header(format!("{}: unsupported dtype {}", e.name, e.dtype)).into());
        }
        if e.offset != expected {
            return Err(CheckpointError::ShapeOffset(format!(
                "{}: offset {} where {} was expected",
                e.name, e.offset, expected
            ))
            .into());
        }
        let numel = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| CheckpointError::ShapeOffset(format!("{}: shape overflows", e.name)))?;
        let end = expected + 4 * numel;
        if end > data.len() as u64 {
            return Err(CheckpointError::Truncated(format!(
                "{} needs bytes up to {end}, data section has {}",
                e.name,
                data.len()
            ))
            .into());
        }
        let values = data[expected as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), values)?));
        expected = end;
    }
    if expected != data.len() as u64 {
        return Err(CheckpointError::ShapeOffset(format!(
            "{} trailing bytes after the last tensor",
            data.len() as u64 - expected
        ))
        .into());
    }
    Ok((header.meta, out))
}

pub fn save_tensors(path: &Path, info: &CheckpointInfo, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let bytes = encode(info, tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<(CheckpointInfo, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn expect_kind(info: &CheckpointInfo, kind: ModelKind) -> Result<()> {
    if info.kind != kind {
        return Err(Error::Config(format!("expected a {kind:?} checkpoint, found {:?}", info.kind)));
    }
    Ok(())
}

/// Saves a dense model. `info.model` is overwritten with the model's config.
pub fn save_dense(path: &Path, model: &DenseModel, mut info: CheckpointInfo) -> Result<()> {
    info.kind = ModelKind::Dense;
    info.model = model.config().clone();
    info.moe = None;
    let t: Vec<(&str, &Tensor)> = model.params().iter().map(|p| (p.name.as_str(), &p.value)).collect();
    save_tensors(path, &info, &t)
}

pub fn load_dense(path: &Path) -> Result<(DenseModel, CheckpointInfo)> {
    let (info, tensors) = load_tensors(path)?;
    expect_kind(&info, ModelKind::Dense)?;
    Ok((DenseModel::from_tensors(info.model.clone(), tensors)?, info))
}

pub fn save_moe(path: &Path, model: &MoeModel, mut info: CheckpointInfo) -> Result<()> {
    info.kind = ModelKind::Moe;
    info.model = model.config().clone();
    info.moe = Some(*model.layout());
    let t: Vec<(&str, &Tensor)> = model.params().iter().map(|p| (p.name.as_str(), &p.value)).collect();
    save_tensors(path, &info, &t)
}

pub fn load_moe(path: &Path) -> Result<(MoeModel, CheckpointInfo)> {
    let (info, tensors) = load_tensors(path)?;
    expect_kind(&info, ModelKind::Moe)?;
    let layout = info
        .moe
        .ok_or_else(|| CheckpointError::Header("MoE checkpoint without layout".into()))?;
    Ok((MoeModel::from_tensors(info.model.clone(), layout, tensors)?, info))
}

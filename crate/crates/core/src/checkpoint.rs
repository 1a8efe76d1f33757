//! Checkpoint files: one JSON header line (config, training metadata and a
//! tensor manifest with byte offsets), then the little-endian `f64` payloads
//! in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelCheckpoint, ModelConfig, Params, TrainingMeta};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload that follows the header line.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    meta: TrainingMeta,
    tensors: Vec<ManifestEntry>,
}

pub fn to_bytes(ck: &ModelCheckpoint) -> Result<Vec<u8>> {
    let mut offset = 0;
    let tensors = ck
        .params
        .iter()
        .map(|(name, t)| {
            let e = ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 8 * t.len();
            e
        })
        .collect();
    let header = Header {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: ck.config,
        meta: ck.meta.clone(),
        tensors,
    };
    let mut out =
        serde_json::to_vec(&header).map_err(|e| Error::invalid(format!("cannot serialize checkpoint header: {e}")))?;
    out.push(b'\n');
    out.reserve(offset);
    for t in ck.params.tensors() {
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a checkpoint and checks it against the architecture its config
/// describes; any disagreement is an artifact mismatch naming the tensors.
pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<ModelCheckpoint> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(origin, "missing checkpoint header line"))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::parse(origin, format!("checkpoint header, column {}: {e}", e.column())))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::parse(
            origin,
            format!("unsupported checkpoint format_version {}", header.format_version),
        ));
    }
    let payload = &bytes[nl + 1..];
    let mut expected_end = 0;
    let mut entries = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let len: usize = e.shape.iter().product();
        let end = e.offset + 8 * len;
        if e.offset != expected_end || end > payload.len() {
            return Err(Error::parse(
                origin,
                format!("tensor {} has an inconsistent or truncated payload", e.name),
            ));
        }
        let values = payload[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        entries.push((e.name.clone(), Tensor::new(&e.shape, values)?));
        expected_end = end;
    }
    if expected_end != payload.len() {
        return Err(Error::parse(origin, "trailing bytes after the last tensor"));
    }
    let ck = ModelCheckpoint {
        config: header.config,
        params: Params::from_entries(entries),
        meta: header.meta,
    };
    ck.validate()?;
    Ok(ck)
}

pub fn write(ck: &ModelCheckpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(ck)?;
    // Write then rename, so a crash never leaves a half-written checkpoint.
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

//! Bit-exact checkpoint files.
//!
//! Layout: 8-byte magic "KANACKPT", u32 format version, u64 header length,
//! a UTF-8 JSON header (config, metadata, tensor manifest sorted by name),
//! zero padding, then each tensor's raw little-endian f32 payload at a
//! 64-byte-aligned offset relative to the first payload byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KanacError, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::config::ModelConfig;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KANACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const ALIGN: usize = 64;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset relative to the start of the payload region.
    offset: u64,
    /// Payload length in bytes.
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    metadata: BTreeMap<String, String>,
    tensors: Vec<ManifestEntry>,
}

fn align_up(v: usize) -> usize {
    v.div_ceil(ALIGN) * ALIGN
}

/// Serializes a checkpoint. The stored metadata gains a "digest" entry so
/// artifacts can be traced; everything else is written verbatim, making
/// repeated saves of one checkpoint byte-identical.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.validate().map_err(|e| {
        KanacError::internal(format!("refusing to write inconsistent checkpoint: {e}"))
    })?;

    let mut metadata = ckpt.metadata.clone();
    metadata.insert("digest".to_string(), ckpt.digest());

    let mut manifest = Vec::with_capacity(ckpt.tensors.len());
    let mut offset = 0usize;
    for (name, t) in &ckpt.tensors {
        let len = t.data.len() * 4;
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            offset: offset as u64,
            len: len as u64,
        });
        offset = align_up(offset + len);
    }
    let header = Header {
        config: ckpt.config.clone(),
        metadata,
        tensors: manifest,
    };
    let header_json = serde_json::to_vec(&header)?;

    let payload_base = align_up(20 + header_json.len());
    let total = payload_base
        + header
            .tensors
            .last()
            .map(|e| (e.offset + e.len) as usize)
            .unwrap_or(0);
    let mut bytes = vec![0u8; total];
    bytes[..8].copy_from_slice(CHECKPOINT_MAGIC);
    bytes[8..12].copy_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes[12..20].copy_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes[20..20 + header_json.len()].copy_from_slice(&header_json);
    for (entry, t) in header.tensors.iter().zip(ckpt.tensors.values()) {
        let start = payload_base + entry.offset as usize;
        for (chunk, &v) in bytes[start..start + entry.len as usize]
            .chunks_exact_mut(4)
            .zip(&t.data)
        {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a checkpoint file back into memory and re-validates it.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 20 {
        return Err(KanacError::format(format!(
            "{} is too short to hold a checkpoint header",
            path.display()
        )));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(KanacError::format(format!(
            "{} does not start with the checkpoint magic",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(KanacError::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if 20 + header_len > bytes.len() {
        return Err(KanacError::format(format!(
            "{} is truncated inside the header",
            path.display()
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[20..20 + header_len])
        .map_err(|e| KanacError::format(format!("unreadable checkpoint header: {e}")))?;

    let payload_base = align_up(20 + header_len);
    let mut tensors = BTreeMap::new();
    for entry in &header.tensors {
        let expected: usize = entry.shape.iter().product();
        if expected * 4 != entry.len as usize {
            return Err(KanacError::format(format!(
                "tensor '{}' declares shape {:?} but {} payload bytes",
                entry.name, entry.shape, entry.len
            )));
        }
        let start = payload_base + entry.offset as usize;
        let end = start + entry.len as usize;
        if end > bytes.len() {
            return Err(KanacError::format(format!(
                "{} is truncated inside tensor '{}'",
                path.display(),
                entry.name
            )));
        }
        let data: Vec<f32> = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors
            .insert(
                entry.name.clone(),
                Tensor {
                    shape: entry.shape.clone(),
                    data,
                },
            )
            .is_some()
        {
            return Err(KanacError::format(format!(
                "duplicate tensor '{}' in manifest",
                entry.name
            )));
        }
    }

    let ckpt = Checkpoint {
        config: header.config,
        tensors,
        metadata: header.metadata,
    };
    ckpt.validate()?;
    Ok(ckpt)
}

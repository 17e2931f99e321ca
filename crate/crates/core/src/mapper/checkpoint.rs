//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"PXMC" | u32 version | u64 manifest_len | manifest (JSON) | payload
//! ```
//!
//! The payload is every tensor's `f64` values in directory order. Offsets in
//! the directory count bytes from the start of the payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{HybridAxialMapper, MapperConfig, MapperError, MapperParams, ModelGeometry};
use crate::autodiff::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PXMC";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a mapper checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("malformed checkpoint manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Mapper(#[from] MapperError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A trained mapper plus the magnitude scale its regression head uses.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub mapper: HybridAxialMapper,
    pub s_max: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config: MapperConfig,
    geometry: ModelGeometry,
    s_max: f64,
    tensors: Vec<DirectoryEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DirectoryEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    trainable: bool,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_checkpoint(self, &mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        read_checkpoint(bytes)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut w: W) -> Result<(), CheckpointError> {
    let mapper = &ckpt.mapper;
    let mut offset = 0u64;
    let tensors = mapper
        .params()
        .entries()
        .iter()
        .map(|e| {
            let entry = DirectoryEntry {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                offset,
                trainable: e.trainable,
            };
            offset += 8 * e.tensor.numel() as u64;
            entry
        })
        .collect();
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        config: mapper.config().clone(),
        geometry: *mapper.geometry(),
        s_max: ckpt.s_max,
        tensors,
    };
    let json =
        serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for e in mapper.params().entries() {
        for v in e.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let take = |start: usize, len: usize| -> Result<&[u8], CheckpointError> {
        bytes
            .get(start..start + len)
            .ok_or(CheckpointError::Truncated {
                expected: start + len,
                actual: bytes.len(),
            })
    };
    let magic: [u8; 4] = take(0, 4)?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(take(4, 4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let manifest_len = u64::from_le_bytes(take(8, 8)?.try_into().expect("8 bytes")) as usize;
    let manifest: Manifest = serde_json::from_slice(take(16, manifest_len)?)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.format_version != version {
        return Err(CheckpointError::Manifest(format!(
            "manifest version {} disagrees with header version {version}",
            manifest.format_version
        )));
    }
    let payload_start = 16 + manifest_len;
    let mut params = MapperParams::default();
    for entry in manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let raw = take(payload_start + entry.offset as usize, 8 * numel)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(entry.shape, data).map_err(MapperError::from)?;
        params.insert(entry.name, tensor, entry.trainable);
    }
    let mapper = HybridAxialMapper::from_parts(manifest.config, manifest.geometry, params)?;
    Ok(Checkpoint {
        mapper,
        s_max: manifest.s_max,
    })
}

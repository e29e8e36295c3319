//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` LE format version, `u64` LE header length,
//! a UTF-8 JSON header (metadata plus a manifest of named f32 arrays with
//! byte offsets into the data section), then the little-endian f32 data.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::network::Arch;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"DUALKDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub arch: Arch,
    pub spec_name: String,
    pub epoch: usize,
    pub val_accuracy: f64,
    pub seed: u64,
    /// Source checkpoints for averaged weights; empty otherwise.
    #[serde(default)]
    pub constituents: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    metadata: CheckpointMeta,
    manifest: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// `(name, shape, values)` in network parameter order.
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let manifest: Vec<ManifestEntry> = self
            .tensors
            .iter()
            .map(|(name, shape, values)| {
                let length = values.len() as u64 * 4;
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    dtype: "f32".into(),
                    offset,
                    length,
                };
                offset += length;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            metadata: self.meta.clone(),
            manifest,
        })
        .expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + offset as usize);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, values) in &self.tensors {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
        if bytes.len() < 8 || bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 20 {
            return Err(corrupt("truncated preamble"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let data_start = 20usize
            .checked_add(usize::try_from(hlen).map_err(|_| corrupt("header length overflows"))?)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("header runs past end of file"))?;
        let header: Header = serde_json::from_slice(&bytes[20..data_start])
            .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        let data = &bytes[data_start..];
        let mut expected_offset = 0u64;
        let mut tensors = Vec::with_capacity(header.manifest.len());
        for e in header.manifest {
            if e.dtype != "f32" {
                return Err(CheckpointError::Corrupt(format!("array `{}` has dtype {}", e.name, e.dtype)));
            }
            let count: usize = e.shape.iter().product();
            if e.length != count as u64 * 4 || e.offset != expected_offset {
                return Err(CheckpointError::Corrupt(format!("manifest entry `{}` is inconsistent", e.name)));
            }
            let end = (e.offset + e.length) as usize;
            if end > data.len() {
                return Err(CheckpointError::Corrupt(format!("array `{}` runs past end of file", e.name)));
            }
            let values = data[e.offset as usize..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            expected_offset = e.offset + e.length;
            tensors.push((e.name, e.shape, values));
        }
        if expected_offset as usize != data.len() {
            return Err(corrupt("trailing bytes after data section"));
        }
        Ok(Self {
            meta: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                arch: Arch::Student { width: 1.0 },
                spec_name: "student_micro_w1".into(),
                epoch: 3,
                val_accuracy: 0.5,
                seed: 9,
                constituents: vec![],
            },
            tensors: vec![
                ("a".into(), vec![2], vec![1.5, -0.0]),
                ("b".into(), vec![1, 1], vec![f32::MIN_POSITIVE]),
            ],
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.tensors[0].2[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn rejects_bad_magic_and_future_version() {
        let mut b = sample().to_bytes();
        b[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::BadMagic)));
        let mut b = sample().to_bytes();
        b[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::Version { found: 2, .. })));
    }

    #[test]
    fn rejects_truncation() {
        let b = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&b[..b.len() - 1]), Err(CheckpointError::Corrupt(_))));
    }
}

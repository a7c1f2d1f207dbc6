//! Single-file parameter checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! u64            header length H in bytes (includes trailing space padding)
//! [u8; H]        UTF-8 JSON header, space padded so that 8 + H is a multiple of 8
//! [u8; ...]      raw f32 blobs, each starting at its header `byte_offset`
//!                (offsets are relative to the start of the blob section and 8-aligned)
//! ```
//!
//! The header is `{"format_version", "metadata", "tensors": [{name, shape, dtype, byte_offset}]}`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    metadata: serde_json::Value,
    tensors: Vec<CheckpointEntry>,
}

/// An ordered set of named f32 tensors plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn align8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self { metadata, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> Vec<CheckpointEntry> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let e = CheckpointEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                    byte_offset: offset,
                };
                offset += align8(t.len() * 4) as u64;
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            metadata: self.metadata.clone(),
            tensors: self.entries(),
        };
        let mut json = serde_json::to_vec(&header).expect("header serializes");
        json.resize(align8(8 + json.len()) - 8, b' ');
        let mut out = Vec::with_capacity(8 + json.len() + self.tensors.iter().map(|(_, t)| align8(t.len() * 4)).sum::<usize>());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.resize(align8(out.len()), 0);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let fmt = |m: &str| CheckpointError::Format(m.to_string());
        let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| fmt("truncated length prefix"))?.try_into().unwrap();
        let hlen = u64::from_le_bytes(len_bytes) as usize;
        let json = bytes.get(8..8 + hlen).ok_or_else(|| fmt("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| CheckpointError::Format(e.to_string()))?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(CheckpointError::Version(header.format_version));
        }
        let blobs = &bytes[8 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.dtype != "f32" {
                return Err(CheckpointError::Format(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.byte_offset as usize;
            let raw = blobs
                .get(start..start + n * 4)
                .ok_or_else(|| CheckpointError::Format(format!("{}: blob out of range", e.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::from_vec(e.shape, data).map_err(|err| CheckpointError::Format(err.to_string()))?;
            tensors.push((e.name, t.with_grad(true)));
        }
        Ok(Self { metadata: header.metadata, tensors })
    }

    /// Writes via a temporary file in the same directory and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}

/// Writes `bytes` to `path` atomically, creating parent directories.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({"iter": 7, "no_mask": false}));
        c.push("a", Tensor::from_vec([3], vec![1.0, -2.0, 3.5]).unwrap());
        c.push("b/w", Tensor::from_vec([2, 2], vec![0.25; 4]).unwrap());
        c
    }

    #[test]
    fn layout_is_aligned_and_versioned() {
        let bytes = sample().to_bytes();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!((8 + hlen) % 8, 0);
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header["format_version"], 1);
        assert_eq!(header["tensors"][1]["byte_offset"], 16);
        assert_eq!(header["tensors"][1]["dtype"], "f32");
        let blob = &bytes[8 + hlen..];
        assert_eq!(f32::from_le_bytes(blob[4..8].try_into().unwrap()), -2.0);
    }

    #[test]
    fn bytes_roundtrip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.metadata, c.metadata);
        assert_eq!(back.get("b/w").unwrap().data(), c.get("b/w").unwrap().data());
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn rejects_other_versions_and_truncation() {
        let mut bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..4]), Err(CheckpointError::Format(_))));
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let text = String::from_utf8(bytes[8..8 + hlen].to_vec()).unwrap().replace("\"format_version\":1", "\"format_version\":9");
        bytes[8..8 + hlen].copy_from_slice(text.as_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Version(9))));
    }
}

//! Single-file parameter containers.
//!
//! Layout: one line of compact JSON (the header), a `\n`, then the
//! concatenated tensor payloads as little-endian f64 bytes. The header
//! carries a format version, caller-supplied metadata (model kind, config,
//! labels), and a manifest of `{path, shape, offset}` entries whose offsets
//! are relative to the first payload byte.
//!
//! Tensors are keyed by a path string ("layer.0.attention.wq") and stored
//! in sorted path order, which makes the byte stream a pure function of
//! the contents. Round-trips are bit-exact: floats are moved via their raw
//! bit patterns, never reformatted.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::tensor::Tensor;

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
    #[error("unsupported checkpoint format version {found} (supported: {FORMAT_VERSION})")]
    Version { found: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    path: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u64,
    #[serde(flatten)]
    meta: Map<String, Value>,
    manifest: Vec<ManifestEntry>,
}

/// Named tensors plus free-form metadata, in one file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Map<String, Value>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(meta: Map<String, Value>, tensors: BTreeMap<String, Tensor>) -> Self {
        Checkpoint { meta, tensors }
    }

    /// String-valued metadata field, if present.
    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(Value::as_str)
    }

    /// Serialize to `path`. The byte stream depends only on the contents,
    /// so identical checkpoints are identical files.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if self.meta.contains_key("format_version") || self.meta.contains_key("manifest") {
            return Err(CheckpointError::Header(
                "metadata must not define reserved keys format_version/manifest".into(),
            ));
        }
        let mut manifest = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, tensor) in &self.tensors {
            manifest.push(ManifestEntry {
                path: name.clone(),
                shape: tensor.shape().to_vec(),
                offset,
            });
            offset += (tensor.numel() * 8) as u64;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            meta: self.meta.clone(),
            manifest,
        };
        let header_line =
            serde_json::to_string(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;

        let mut file = fs::File::create(path)?;
        file.write_all(header_line.as_bytes())?;
        file.write_all(b"\n")?;
        let mut payload = Vec::with_capacity(offset as usize);
        for tensor in self.tensors.values() {
            for v in tensor.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        file.write_all(&payload)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Header("no header line found".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: header.format_version,
            });
        }
        let payload = &bytes[newline + 1..];

        let mut tensors = BTreeMap::new();
        let mut expected_bytes = 0usize;
        for entry in &header.manifest {
            let numel: usize = entry.shape.iter().product();
            let size = numel * 8;
            let start = entry.offset as usize;
            let end = start
                .checked_add(size)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| {
                    CheckpointError::Manifest(format!(
                        "tensor '{}' spans bytes {start}..{} but payload has {}",
                        entry.path,
                        start + size,
                        payload.len()
                    ))
                })?;
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|chunk| f64::from_le_bytes(chunk.try_into().expect("chunk size is 8")))
                .collect();
            let tensor = Tensor::new(data, entry.shape.clone())
                .map_err(|e| CheckpointError::Manifest(format!("tensor '{}': {e}", entry.path)))?;
            if tensors.insert(entry.path.clone(), tensor).is_some() {
                return Err(CheckpointError::Manifest(format!(
                    "duplicate tensor path '{}'",
                    entry.path
                )));
            }
            expected_bytes += size;
        }
        if expected_bytes != payload.len() {
            return Err(CheckpointError::Manifest(format!(
                "payload holds {} bytes but manifest accounts for {expected_bytes}",
                payload.len()
            )));
        }
        Ok(Checkpoint {
            meta: header.meta,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Checkpoint {
        let mut meta = Map::new();
        meta.insert("kind".into(), json!("adapter"));
        meta.insert("domain_label".into(), json!("scidocs"));
        meta.insert("config".into(), json!({"bottleneck_dim": 4}));
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "zeta.weight".into(),
            Tensor::new(vec![1.0, -0.0, f64::MIN_POSITIVE, 1e308], vec![2, 2]).unwrap(),
        );
        tensors.insert(
            "alpha.bias".into(),
            Tensor::new(vec![0.1 + 0.2, -3.5], vec![2]).unwrap(),
        );
        Checkpoint::new(meta, tensors)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let original = sample();
        original.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.meta, original.meta);
        assert_eq!(loaded.tensors.len(), original.tensors.len());
        for (name, tensor) in &original.tensors {
            let got = &loaded.tensors[name];
            assert_eq!(got.shape(), tensor.shape());
            for (a, b) in got.data().iter().zip(tensor.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "bit drift in {name}");
            }
        }
    }

    #[test]
    fn save_is_deterministic_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        sample().save(&p1).unwrap();
        sample().save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn manifest_is_sorted_by_path_with_consecutive_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        sample().save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let newline = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: Value = serde_json::from_slice(&bytes[..newline]).unwrap();
        let manifest = header["manifest"].as_array().unwrap();
        assert_eq!(manifest[0]["path"], "alpha.bias");
        assert_eq!(manifest[0]["offset"], 0);
        assert_eq!(manifest[1]["path"], "zeta.weight");
        // alpha.bias holds two f64s = 16 bytes.
        assert_eq!(manifest[1]["offset"], 16);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        sample().save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::Manifest(_))
        ));
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        fs::write(&path, b"{\"format_version\":9,\"manifest\":[]}\n").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::Version { found: 9 })
        ));
    }

    #[test]
    fn garbage_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        fs::write(&path, b"not json\nrest").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::Header(_))
        ));
    }

    #[test]
    fn reserved_meta_keys_are_rejected() {
        let mut ckpt = sample();
        ckpt.meta.insert("manifest".into(), json!([]));
        let dir = tempfile::tempdir().unwrap();
        assert!(ckpt.save(&dir.path().join("x.ckpt")).is_err());
    }
}

//! Self-describing binary container for trained weights.
//!
//! Layout: the 8-byte magic `RELCLIP1`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every array's values as consecutive 32-bit
//! little-endian floats in header order. The header holds the model config,
//! run metadata and, per array, its name and shape.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"RELCLIP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    /// Free-form tags such as `"final"` or `"nan_abort"`.
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    metadata: CheckpointMeta,
    arrays: Vec<ArrayHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub metadata: CheckpointMeta,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            arrays: self.arrays.iter().map(|(n, t)| ArrayHeader { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let n_values: usize = self.arrays.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 4 * n_values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Checkpoint { path: path.to_path_buf(), reason: reason.to_string() };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing RELCLIP1 magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        let mut offset = 16 + hlen;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for a in header.arrays {
            let n: usize = a.shape.iter().product();
            let raw = bytes.get(offset..offset + 4 * n).ok_or_else(|| bad(&format!("truncated array `{}`", a.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            arrays.push((a.name, Tensor::new(a.shape, data)));
            offset += 4 * n;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after the last array"));
        }
        Ok(Checkpoint { config: header.config, metadata: header.metadata, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: serde_json::json!({"d_model": 4}),
            metadata: CheckpointMeta { seed: 9, epoch: 120, note: "final".into() },
            arrays: vec![
                ("a".into(), Tensor::new([2, 2], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE])),
                ("b".into(), Tensor::new([3], vec![0.0, 1e-30, -7.0])),
            ],
        }
    }

    #[test]
    fn round_trips_bytes_and_files() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes(), Path::new("x")).unwrap(), c);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/model.ckpt");
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
        assert_eq!(c.get("b").unwrap().shape(), &[3]);
    }

    #[test]
    fn values_are_little_endian_f32_after_header() {
        let bytes = sample().to_bytes();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let first = f32::from_le_bytes(bytes[16 + hlen..20 + hlen].try_into().unwrap());
        assert_eq!(first, 1.0);
        assert_eq!(bytes.len(), 16 + hlen + 4 * 7);
    }

    #[test]
    fn rejects_corrupt_input() {
        let bytes = sample().to_bytes();
        let p = Path::new("bad");
        assert!(Checkpoint::from_bytes(b"NOTMAGIC\0\0\0\0\0\0\0\0", p).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra, p), Err(Error::Checkpoint { .. })));
    }
}

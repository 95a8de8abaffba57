//! Single-file tensor container.
//!
//! Byte layout:
//!
//! ```text
//! offset 0   8 bytes   magic "CKVTNSR1"
//! offset 8   8 bytes   header length N, u64 little-endian
//! offset 16  N bytes   header, UTF-8 JSON (see below)
//! offset 16+N          payload: tensors back to back, f32 little-endian, row-major
//! ```
//!
//! The header is `{"metadata": {...}, "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}`.
//! `offset` is relative to the start of the payload, `dtype` is always `"f32"`,
//! `shape` is `[rows, cols]`. Tensors appear in insertion order and the payload
//! has no padding, so the payload length is exactly `4 × Σ rows·cols`.
//! Metadata keys are serialized in sorted order, which makes the encoding a
//! pure function of the content.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{bail, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"CKVTNSR1";

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: [usize; 2],
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    metadata: BTreeMap<String, Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct TensorFile {
    pub metadata: BTreeMap<String, Value>,
    names: Vec<String>,
    tensors: BTreeMap<String, Matrix<f32>>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<Value>) {
        self.metadata.insert(key.to_string(), value.into());
    }

    pub fn meta(&self, key: &str) -> Result<&Value> {
        self.metadata.get(key).ok_or_else(|| crate::Error::Format(format!("missing metadata key {key:?}")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta(key)?
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| crate::Error::Format(format!("metadata {key:?} is not an unsigned integer")))
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Matrix<f32>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            bail!(Format, "duplicate tensor {name:?}");
        }
        self.names.push(name.clone());
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Matrix<f32>> {
        self.tensors.get(name).ok_or_else(|| crate::Error::Format(format!("missing tensor {name:?}")))
    }

    /// Fetches a tensor and checks its shape.
    pub fn expect(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix<f32>> {
        let t = self.get(name)?;
        if t.shape() != (rows, cols) {
            bail!(Format, "tensor {name:?} has shape {:?}, expected ({rows}, {cols})", t.shape());
        }
        Ok(t.clone())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total number of stored scalars.
    pub fn element_count(&self) -> usize {
        self.tensors.values().map(|t| t.rows() * t.cols()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.names.len());
        let mut offset = 0u64;
        for name in &self.names {
            let t = &self.tensors[name];
            let nbytes = (t.rows() * t.cols() * 4) as u64;
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: [t.rows(), t.cols()],
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let header = serde_json::to_vec(&Header { metadata: self.metadata.clone(), tensors: entries })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for name in &self.names {
            for v in self.tensors[name].data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            bail!(Format, "not a tensor container (bad magic)");
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let Some(header_bytes) = bytes.get(16..16 + header_len) else {
            bail!(Format, "truncated header");
        };
        let header: Header = serde_json::from_slice(header_bytes)?;
        let payload = &bytes[16 + header_len..];
        let mut file = TensorFile { metadata: header.metadata, ..Default::default() };
        for e in header.tensors {
            if e.dtype != "f32" {
                bail!(Format, "tensor {:?} has unsupported dtype {:?}", e.name, e.dtype);
            }
            let [rows, cols] = e.shape;
            if e.nbytes as usize != rows * cols * 4 {
                bail!(Format, "tensor {:?}: nbytes {} disagrees with shape {rows}x{cols}", e.name, e.nbytes);
            }
            let start = e.offset as usize;
            let Some(raw) = payload.get(start..start + e.nbytes as usize) else {
                bail!(Format, "tensor {:?} extends past end of payload", e.name);
            };
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            file.insert(e.name, Matrix::from_vec(rows, cols, data)?)?;
        }
        Ok(file)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Length of the payload section in bytes.
    pub fn payload_len(&self) -> usize {
        self.element_count() * 4
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic() {
        assert!(matches!(TensorFile::from_bytes(b"NOTATENSORFILE!!"), Err(crate::Error::Format(_))));
    }

    #[test]
    fn layout_is_documented_one() {
        let mut f = TensorFile::new();
        f.set_meta("kind", "test");
        f.insert("a", Matrix::from_vec(1, 2, vec![1.0, -2.0]).unwrap()).unwrap();
        let bytes = f.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload = &bytes[16 + n..];
        assert_eq!(payload.len(), 8);
        assert_eq!(&payload[..4], &1.0f32.to_le_bytes());
        assert_eq!(&payload[4..], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let mut f = TensorFile::new();
        f.insert("a", Matrix::zeros(3, 3)).unwrap();
        let bytes = f.to_bytes().unwrap();
        assert!(TensorFile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(shapes in proptest::collection::vec((1usize..5, 1usize..5), 1..4), seed in any::<u32>()) {
            let mut f = TensorFile::new();
            f.set_meta("seed", seed);
            for (i, (r, c)) in shapes.iter().enumerate() {
                let m = Matrix::from_fn(*r, *c, |a, b| (seed as f64 + (a * 7 + b) as f64).sin());
                f.insert(format!("t{i}"), m).unwrap();
            }
            let bytes = f.to_bytes().unwrap();
            let g = TensorFile::from_bytes(&bytes).unwrap();
            prop_assert_eq!(g.names(), f.names());
            for n in f.names() {
                prop_assert_eq!(g.get(n).unwrap(), f.get(n).unwrap());
            }
            prop_assert_eq!(g.to_bytes().unwrap(), bytes);
        }
    }
}

//! Self-describing tensor container used for model weights, router weights and
//! training datasets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "TKRTENS1"
//! offset 8   u64       header length H in bytes
//! offset 16  H bytes   UTF-8 JSON header:
//!                      {"kind": str, "meta": object,
//!                       "tensors": [{"name": str, "shape": [u64...]}...]}
//! offset 16+H          tensor payloads in header order, each the row-major
//!                      f64 values of its shape (product of dims elements)
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so loading is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"TKRTENS1";

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a tensor file (bad magic)")]
    BadMagic,
    #[error("truncated tensor file")]
    Truncated,
    #[error("invalid header: {0}")]
    Header(String),
    #[error("tensor {name}: shape {shape:?} needs {expected} values, got {got}")]
    ShapeMismatch { name: String, shape: Vec<usize>, expected: usize, got: usize },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("expected a {expected} file, found {found}")]
    KindMismatch { expected: String, found: String },
    #[error("duplicate tensor {0}")]
    Duplicate(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub kind: String,
    pub meta: serde_json::Value,
    tensors: Vec<Tensor>,
}

impl TensorFile {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self { kind: kind.into(), meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<(), TensorFileError> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorFileError::ShapeMismatch { name, shape, expected, got: data.len() });
        }
        if self.tensors.iter().any(|t| t.name == name) {
            return Err(TensorFileError::Duplicate(name));
        }
        self.tensors.push(Tensor { name, shape, data });
        Ok(())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, TensorFileError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| TensorFileError::MissingTensor(name.to_string()))
    }

    /// Fetches a tensor and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&[f64], TensorFileError> {
        let t = self.get(name)?;
        if t.shape != shape {
            return Err(TensorFileError::ShapeMismatch {
                name: name.to_string(),
                shape: shape.to_vec(),
                expected: shape.iter().product(),
                got: t.data.len(),
            });
        }
        Ok(&t.data)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), TensorFileError> {
        if self.kind != kind {
            return Err(TensorFileError::KindMismatch { expected: kind.to_string(), found: self.kind.clone() });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|t| TensorEntry { name: t.name.clone(), shape: t.shape.clone() }).collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|t| t.data.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorFileError> {
        if bytes.len() < 16 {
            return Err(if bytes.starts_with(&MAGIC[..bytes.len().min(8)]) {
                TensorFileError::Truncated
            } else {
                TensorFileError::BadMagic
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(TensorFileError::BadMagic);
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < header_len {
            return Err(TensorFileError::Truncated);
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| TensorFileError::Header(e.to_string()))?;
        let mut rest = &body[header_len..];
        let mut file = TensorFile::new(header.kind, header.meta);
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if rest.len() < n * 8 {
                return Err(TensorFileError::Truncated);
            }
            let data = rest[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            rest = &rest[n * 8..];
            file.push(entry.name, entry.shape, data)?;
        }
        if !rest.is_empty() {
            return Err(TensorFileError::Header(format!("{} trailing bytes after last tensor", rest.len())));
        }
        Ok(file)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), TensorFileError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, TensorFileError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_starts_with_magic_and_header_length() {
        let mut f = TensorFile::new("test", serde_json::json!({"a": 1}));
        f.push("x", vec![2], vec![1.0, -0.0]).unwrap();
        let bytes = f.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let h = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 16 + h + 16);
        let back = TensorFile::from_bytes(&bytes).unwrap();
        assert_eq!(back.get("x").unwrap().data[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_shape_mismatch_and_truncation() {
        let mut f = TensorFile::new("t", serde_json::Value::Null);
        assert!(matches!(f.push("x", vec![2, 2], vec![0.0; 3]), Err(TensorFileError::ShapeMismatch { .. })));
        f.push("x", vec![3], vec![0.0; 3]).unwrap();
        let bytes = f.to_bytes();
        assert!(matches!(TensorFile::from_bytes(&bytes[..bytes.len() - 1]), Err(TensorFileError::Truncated)));
        assert!(matches!(TensorFile::from_bytes(b"nope nope nope nope"), Err(TensorFileError::BadMagic)));
    }

    proptest::proptest! {
        #[test]
        fn bit_exact_round_trip(data in proptest::collection::vec(proptest::num::f64::ANY, 0..64)) {
            let mut f = TensorFile::new("p", serde_json::json!({"n": data.len()}));
            f.push("v", vec![data.len()], data.clone()).unwrap();
            let back = TensorFile::from_bytes(&f.to_bytes()).unwrap();
            let bits: Vec<u64> = back.get("v").unwrap().data.iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = data.iter().map(|v| v.to_bits()).collect();
            proptest::prop_assert_eq!(bits, want);
        }
    }
}

//! Single-file array container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | 0..8             | magic `TPLNCKPT`                          |
//! | 8..12            | format version, `u32` (currently 1)       |
//! | 12..20           | manifest length `L`, `u64`                |
//! | 20..20+L         | manifest, UTF-8 JSON                      |
//! | 20+L..           | payload: raw little-endian array buffers  |
//!
//! The manifest is `{"meta": {str: str}, "arrays": [{"name", "dtype",
//! "shape", "offset", "nbytes"}]}` where `offset` is relative to the start of
//! the payload. Arrays are stored in name order, back to back.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array::{numel, Array};
use crate::error::{Result, TensorError};
use crate::scalar::{DType, Scalar};

const MAGIC: &[u8; 8] = b"TPLNCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct ManifestEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    meta: BTreeMap<String, String>,
    arrays: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
struct Stored {
    dtype: DType,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    arrays: BTreeMap<String, Stored>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, a: &Array<T>) {
        let mut bytes = Vec::with_capacity(a.len() * T::DTYPE.size_of());
        for &v in a.data() {
            v.write_le(&mut bytes);
        }
        self.arrays.insert(
            name.into(),
            Stored {
                dtype: T::DTYPE,
                shape: a.shape().to_vec(),
                bytes,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn dtype(&self, name: &str) -> Option<DType> {
        self.arrays.get(name).map(|s| s.dtype)
    }

    /// Reads an array, converting from the stored dtype if necessary.
    pub fn get<T: Scalar>(&self, name: &str) -> Result<Array<T>> {
        let s = self
            .arrays
            .get(name)
            .ok_or_else(|| TensorError::Format(format!("array '{name}' not in checkpoint")))?;
        let data = match s.dtype {
            DType::F32 => s.bytes.chunks_exact(4).map(|b| T::of(f32::read_le(b) as f64)).collect(),
            DType::F64 => s.bytes.chunks_exact(8).map(|b| T::of(f64::read_le(b))).collect(),
        };
        Array::new(s.shape.clone(), data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let arrays = self
            .arrays
            .iter()
            .map(|(name, s)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    dtype: s.dtype,
                    shape: s.shape.clone(),
                    offset,
                    nbytes: s.bytes.len() as u64,
                };
                offset += s.bytes.len() as u64;
                e
            })
            .collect();
        let manifest = serde_json::to_vec(&Manifest {
            meta: self.meta.clone(),
            arrays,
        })
        .expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for s in self.arrays.values() {
            out.extend_from_slice(&s.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| TensorError::Format(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(TensorError::Format(format!("unsupported version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let payload_start = 20usize.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[20..payload_start]).map_err(|e| TensorError::Format(e.to_string()))?;
        let payload = &bytes[payload_start..];
        let mut arrays = BTreeMap::new();
        for e in manifest.arrays {
            let expected = numel(&e.shape) * e.dtype.size_of();
            if e.nbytes as usize != expected {
                return Err(TensorError::Format(format!(
                    "'{}': {} bytes for shape {:?}",
                    e.name, e.nbytes, e.shape
                )));
            }
            let start = e.offset as usize;
            let end = start + expected;
            if end > payload.len() {
                return Err(TensorError::Format(format!("'{}' runs past end of file", e.name)));
            }
            arrays.insert(
                e.name,
                Stored {
                    dtype: e.dtype,
                    shape: e.shape,
                    bytes: payload[start..end].to_vec(),
                },
            );
        }
        Ok(Checkpoint {
            meta: manifest.meta,
            arrays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

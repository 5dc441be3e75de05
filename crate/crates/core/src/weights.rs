//! Named tensor store and the `FKCD` weight file.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! b"FKCD"  u32 version  u32 header_len  header_json[header_len]  f32 payload...
//! ```
//!
//! `header_json` is an ordered array of `{"name": .., "shape": [..]}`; payloads
//! follow in header order.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WeightFileError};
use crate::fsutil::write_atomic;
use crate::nn::{is_buffer_name, LayoutEntry};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"FKCD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct WeightStore<F: Scalar = f32> {
    tensors: IndexMap<String, Tensor<F>>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
}

impl<F: Scalar> WeightStore<F> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: String, t: Tensor<F>) -> Result<(), WeightFileError> {
        if self.tensors.contains_key(&name) {
            return Err(WeightFileError::Duplicate(name));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Scalar count over trainable parameters (running statistics excluded).
    pub fn num_params(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| !is_buffer_name(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<G: Scalar>(&self) -> WeightStore<G> {
        WeightStore {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Checks names and shapes against a layout, in any order.
    pub fn validate(&self, layout: &[LayoutEntry]) -> Result<(), WeightFileError> {
        for e in layout {
            let t = self
                .tensors
                .get(&e.name)
                .ok_or_else(|| WeightFileError::Missing(e.name.clone()))?;
            if t.shape() != e.shape.as_slice() {
                return Err(WeightFileError::ShapeMismatch {
                    name: e.name.clone(),
                    found: t.shape().to_vec(),
                    expected: e.shape.clone(),
                });
            }
        }
        if self.tensors.len() != layout.len() {
            let known: std::collections::HashSet<&str> = layout.iter().map(|e| e.name.as_str()).collect();
            if let Some(extra) = self.tensors.keys().find(|n| !known.contains(n.as_str())) {
                return Err(WeightFileError::Unexpected(extra.clone()));
            }
        }
        Ok(())
    }
}

impl WeightStore<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header: Vec<HeaderEntry> = self
            .tensors
            .iter()
            .map(|(n, t)| HeaderEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.num_elements());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightFileError> {
        let take = |from: usize, len: usize| {
            bytes.get(from..from + len).ok_or(WeightFileError::Truncated {
                expected: from + len,
                found: bytes.len(),
            })
        };
        let magic: [u8; 4] = take(0, 4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(WeightFileError::BadMagic { found: magic });
        }
        let version = u32::from_le_bytes(take(4, 4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(WeightFileError::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let hlen = u32::from_le_bytes(take(8, 4)?.try_into().expect("4 bytes")) as usize;
        let header: Vec<HeaderEntry> = serde_json::from_slice(take(12, hlen)?)
            .map_err(|e| WeightFileError::Header(e.to_string()))?;
        let total: usize = header
            .iter()
            .map(|h| h.shape.iter().product::<usize>())
            .sum();
        let start = 12 + hlen;
        let payload = take(start, total * 4)?;
        let mut store = Self::new();
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        for h in header {
            let numel = h.shape.iter().product();
            let data: Vec<f32> = floats.by_ref().take(numel).collect();
            let t = Tensor::new(&h.shape, data)
                .map_err(|e| WeightFileError::Header(format!("`{}`: {e}", h.name)))?;
            store.insert(h.name, t)?;
        }
        let trailing = bytes.len() - start - total * 4;
        if trailing != 0 {
            return Err(WeightFileError::Trailing(trailing));
        }
        Ok(store)
    }
}

pub fn save_weights(store: &WeightStore, path: &Path) -> Result<()> {
    write_atomic(path, &store.to_bytes())?;
    Ok(())
}

/// Reads a weight file without checking it against any model layout.
pub fn load_weights(path: &Path) -> Result<WeightStore> {
    let bytes = std::fs::read(path)?;
    Ok(WeightStore::from_bytes(&bytes)?)
}

/// Reads a weight file and checks every tensor against `layout`.
pub fn load_weights_for(path: &Path, layout: &[LayoutEntry]) -> Result<WeightStore> {
    let store = load_weights(path)?;
    store.validate(layout)?;
    Ok(store)
}

//! Named parameter sets and their flat `f32` serialization.
//!
//! The blob is every parameter's data as little-endian `f32`, concatenated
//! in set order. The index maps each name to its shape and byte offset.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    params: Vec<NamedParam<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.push(NamedParam {
            name: name.into(),
            value,
        });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedParam<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedParam<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn at(&self, i: usize) -> &NamedParam<T> {
        &self.params[i]
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| NamedParam {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

pub type ParamIndex = BTreeMap<String, ParamEntry>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParamError {
    #[error("duplicate parameter name {0:?}")]
    Duplicate(String),
    #[error("parameter {name:?} at byte {offset} overruns the {len}-byte blob")]
    Overrun {
        name: String,
        offset: usize,
        len: usize,
    },
    #[error("parameter {name:?} has misaligned offset {offset}")]
    Misaligned { name: String, offset: usize },
}

/// Serializes `params` into a little-endian `f32` blob and its index.
pub fn encode_params<T: Real>(params: &ParamSet<T>) -> Result<(Vec<u8>, ParamIndex), ParamError> {
    let mut blob = Vec::with_capacity(params.numel() * 4);
    let mut index = ParamIndex::new();
    for p in params.iter() {
        let entry = ParamEntry {
            shape: p.value.shape().to_vec(),
            offset: blob.len(),
        };
        if index.insert(p.name.clone(), entry).is_some() {
            return Err(ParamError::Duplicate(p.name.clone()));
        }
        for v in p.value.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok((blob, index))
}

/// Inverse of [`encode_params`]; parameters come back in blob order.
pub fn decode_params<T: Real>(blob: &[u8], index: &ParamIndex) -> Result<ParamSet<T>, ParamError> {
    let mut entries: Vec<_> = index.iter().collect();
    entries.sort_by_key(|(_, e)| e.offset);
    let mut set = ParamSet::new();
    for (name, e) in entries {
        if e.offset % 4 != 0 {
            return Err(ParamError::Misaligned {
                name: name.clone(),
                offset: e.offset,
            });
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 4;
        if end > blob.len() {
            return Err(ParamError::Overrun {
                name: name.clone(),
                offset: e.offset,
                len: blob.len(),
            });
        }
        let data = blob[e.offset..end]
            .chunks_exact(4)
            .map(|b| T::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        set.push(
            name.clone(),
            Tensor::new(&e.shape, data).expect("length checked"),
        );
    }
    Ok(set)
}

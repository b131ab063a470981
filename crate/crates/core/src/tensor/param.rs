//! Named collections of tensors with a canonical flattening order.

use super::{Result, Tensor, TensorError};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeMap;

/// A named set of tensors. Flattening order is lexicographic by name, so two
/// sets with the same names and shapes always line up element-for-element.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Tensors in canonical (name-sorted) order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// All values concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds a set with this set's names and shapes from a flat vector.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.param_count() {
            return Err(TensorError::DimMismatch {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut out = ParamSet::new();
        let mut offset = 0;
        for (name, t) in &self.entries {
            let n = t.numel();
            out.insert(
                name.clone(),
                Tensor::new(t.rows(), t.cols(), flat[offset..offset + n].to_vec())?,
            );
            offset += n;
        }
        Ok(out)
    }

    /// Fresh differentiation roots for every entry.
    pub fn to_leaves(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in &self.entries {
            out.insert(name.clone(), t.as_leaf());
        }
        out
    }

    /// Detached copies of every entry.
    pub fn detach_all(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in &self.entries {
            out.insert(name.clone(), t.detach());
        }
        out
    }

    /// `self + c * other`, entrywise over matching names. Used for gradient
    /// steps on detached values.
    pub fn add_scaled(&self, other: &ParamSet, c: f64) -> Result<ParamSet> {
        if self.len() != other.len() || self.names().ne(other.names()) {
            return Err(TensorError::DimMismatch {
                expected: self.len(),
                got: other.len(),
            });
        }
        let mut out = ParamSet::new();
        for ((name, a), b) in self.entries.iter().zip(other.entries.values()) {
            out.insert(name.clone(), a.detach().add(&b.detach().scale(c)?)?);
        }
        Ok(out)
    }

    /// Same names, replacement tensors given in canonical order.
    pub(crate) fn with_tensors(&self, tensors: Vec<Tensor>) -> ParamSet {
        debug_assert_eq!(tensors.len(), self.entries.len());
        let mut out = ParamSet::new();
        for (name, t) in self.entries.keys().zip(tensors) {
            out.insert(name.clone(), t);
        }
        out
    }

    /// A stable fingerprint of the exact bit patterns of all values.
    pub fn value_fingerprint(&self) -> u64 {
        // FNV-1a over the name bytes and value bits.
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (name, t) in &self.entries {
            name.bytes().for_each(&mut eat);
            for v in t.data() {
                v.to_bits().to_le_bytes().iter().copied().for_each(&mut eat);
            }
        }
        h
    }
}

// Tensors serialize as plain values; graph state never persists.
impl Serialize for Tensor {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            shape: [usize; 2],
            data: &'a [f64],
        }
        Repr { shape: self.shape(), data: self.data() }.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            shape: [usize; 2],
            data: Vec<f64>,
        }
        let repr = Repr::deserialize(deserializer)?;
        Tensor::new(repr.shape[0], repr.shape[1], repr.data).map_err(D::Error::custom)
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

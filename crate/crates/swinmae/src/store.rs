//! Name-keyed parameter and gradient storage.
//!
//! All model weights live in a [`ParamStore`] keyed by hierarchical tensor
//! names ("encoder.stage0.block1.attn.wq", ...). The optimizer, checkpoint
//! codec, and transfer surgery all operate on this map, which keeps every
//! per-tensor operation addressable and deterministic (BTreeMap iteration is
//! sorted by name).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::init::init_tensor;
use crate::tensor::{Scalar, Tensor};

/// Declared name + shape + initializer for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Initializer kinds used across the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Zeros,
    Ones,
    /// Truncated normal, sigma 0.02, resampled outside +/- 2 sigma.
    TruncNormal,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn empty() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }

    /// Materialize every spec'd tensor. Each tensor's random stream is derived
    /// from (seed, name), so initialization order never matters.
    pub fn init(specs: &[TensorSpec], seed: u64) -> Result<Self> {
        let mut map = BTreeMap::new();
        for spec in specs {
            let t = init_tensor::<T>(spec, seed);
            if map.insert(spec.name.clone(), t).is_some() {
                return Err(Error::Config(format!(
                    "duplicate tensor name {:?}",
                    spec.name
                )));
            }
        }
        Ok(ParamStore { map })
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("tensor {name:?} missing from store"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("tensor {name:?} missing from store"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Sorted iteration over (name, tensor).
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn map_cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.map_cast()))
                .collect(),
        }
    }
}

/// Gradient accumulator with the same keying as [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for GradStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradStore<T> {
    pub fn new() -> Self {
        GradStore {
            map: BTreeMap::new(),
        }
    }

    /// Add `grad` into the slot for `name`, creating it if absent.
    pub fn accum(&mut self, name: &str, grad: Tensor<T>) {
        match self.map.get_mut(name) {
            Some(g) => g.add_assign(&grad),
            None => {
                self.map.insert(name.to_string(), grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Merge another gradient store into this one (fixed, name-sorted order).
    pub fn merge(&mut self, other: GradStore<T>) {
        for (name, grad) in other.map {
            match self.map.get_mut(&name) {
                Some(g) => g.add_assign(&grad),
                None => {
                    self.map.insert(name, grad);
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.map.values_mut() {
            g.scale(s);
        }
    }
}

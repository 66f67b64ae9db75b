//! Named parameter storage.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameters. Insertion order is the
/// serialization order of checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    index: BTreeMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: BTreeMap::new() }
    }

    /// Registers a parameter; a duplicate name is a configuration error.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(alloc::format!("duplicate parameter `{name}`")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).map(|&i| ParamId(i)).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Replaces a value, keeping the shape contract.
    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        let cur = &self.values[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::ShapeMismatch { op: "param.set", lhs: cur.shape().to_vec(), rhs: value.shape().to_vec() });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(Tensor::cast).collect(), index: self.index.clone() }
    }

    /// Uniform Glorot init for a `fan_in × fan_out` weight.
    pub(crate) fn glorot<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<S> {
        let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        Tensor::from_fn(shape.to_vec(), |_| S::from_f64(rng.gen_range(-limit..limit)))
    }

    /// Uniform He init for ReLU layers.
    pub(crate) fn he<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<S> {
        let limit = libm::sqrt(6.0 / fan_in as f64);
        Tensor::from_fn(shape.to_vec(), |_| S::from_f64(rng.gen_range(-limit..limit)))
    }
}

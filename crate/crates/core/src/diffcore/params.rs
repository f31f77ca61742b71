use std::collections::HashMap;

use crate::error::{Error, Result};

use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    /// Replaces a parameter's value, keeping its id. Shape may change.
    pub fn replace(&mut self, id: ParamId, value: Tensor) {
        self.tensors[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Overwrites values from `other` by name; shapes must agree.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in other.iter() {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            if self.tensors[id.0].shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}`: shape {:?} != {:?}",
                    t.shape(),
                    self.tensors[id.0].shape()
                )));
            }
            self.tensors[id.0] = t.clone();
        }
        Ok(())
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros(store: &ParamStore) -> Self {
        ParamGrads { grads: store.tensors.iter().map(|t| vec![0.0; t.len()]).collect() }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        for (a, b) in self.grads[id.0].iter_mut().zip(g) {
            *a += b;
        }
    }

    /// Adds `other` in place. Callers sum in a fixed order for determinism.
    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.grads.iter_mut().flatten().for_each(|g| *g *= c);
    }

    pub fn norm(&self) -> f64 {
        self.grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

//! Named, ordered parameter storage shared by all models.
//!
//! Parameters live outside any tape. Each training step binds them onto a
//! fresh [`crate::tensor::Tape`], runs forward/backward, and the optimizer
//! writes updates back here. Iteration order is insertion order, which keeps
//! optimizer traversal and checkpoint layout deterministic.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::Real;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<Real>,
}

#[derive(Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], value: Vec<Real>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::invalid("param_set", format!("duplicate parameter `{name}`")));
        }
        let n: usize = shape.iter().product();
        if n != value.len() {
            return Err(Error::shape("param_set", format!("`{name}`: shape {:?} vs {} values", shape, value.len())));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push(ParamEntry { name: name.to_string(), shape: shape.to_vec(), value });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub(crate) fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn value(&self, id: ParamId) -> &[Real] {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [Real] {
        &mut self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Vec<Real>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if value.len() != e.value.len() {
            return Err(Error::shape("param_set", format!("`{}`: {} vs {} values", e.name, e.value.len(), value.len())));
        }
        e.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.entries.len()).map(ParamId).collect()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

pub fn zeros(n: usize) -> Vec<Real> {
    vec![0.0; n]
}

pub fn ones(n: usize) -> Vec<Real> {
    vec![1.0; n]
}

pub fn normal_init(rng: &mut Prng, n: usize, std: Real) -> Vec<Real> {
    (0..n).map(|_| rng.normal() * std).collect()
}

/// Xavier/Glorot normal for a linear weight of shape `[fan_in, fan_out]`.
pub fn xavier_init(rng: &mut Prng, fan_in: usize, fan_out: usize) -> Vec<Real> {
    let std = (2.0 / (fan_in + fan_out) as Real).sqrt();
    normal_init(rng, fan_in * fan_out, std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.add("w", &[2], vec![0.0, 1.0]).unwrap();
        assert!(ps.add("w", &[1], vec![0.0]).is_err());
    }

    #[test]
    fn iteration_order_is_insertion_order() {
        let mut ps = ParamSet::new();
        ps.add("b", &[1], vec![0.0]).unwrap();
        ps.add("a", &[1], vec![0.0]).unwrap();
        let names: Vec<_> = ps.iter().map(|(_, e)| e.name.clone()).collect();
        assert_eq!(names, vec!["b", "a"]);
    }
}

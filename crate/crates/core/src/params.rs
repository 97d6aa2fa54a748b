//! Named learnable tensors with gradient slots.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{arg, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Ordered map from parameter name to value, gradient and trainable flag.
///
/// Iteration order is lexicographic by name so every pass over the store is
/// deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return arg(format!("duplicate parameter `{name}`"));
        }
        let grad = Tensor::zeros(value.dims());
        self.entries.insert(name, Param { value, grad, trainable });
        Ok(())
    }

    /// Inserts a tensor drawn uniformly from `[-scale, scale)`.
    pub fn insert_uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        dims: &[usize],
        scale: f64,
        trainable: bool,
        rng: &mut R,
    ) -> Result<()> {
        self.insert(name, Tensor::uniform(dims, -scale, scale, rng), trainable)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.value)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.value(name)?.data()[0])
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replaces a value, keeping its dims.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.value_mut(name)?;
        slot.expect_same_dims(&value, name)?;
        *slot = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.grad)
    }

    /// Adds `g` into the gradient slot of `name`. Frozen entries silently
    /// discard the contribution.
    pub fn accumulate(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if p.trainable {
            p.grad.add_assign(g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Moves every entry of `other` into this store.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for (name, p) in other.entries {
            if self.entries.contains_key(&name) {
                return arg(format!("duplicate parameter `{name}`"));
            }
            self.entries.insert(name, p);
        }
        Ok(())
    }

    pub fn num_scalars(&self, trainable_only: bool) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable || !trainable_only)
            .map(|p| p.value.len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_unique_and_grad_dims_follow_value() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2, 3]), true).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1]), true).is_err());
        assert_eq!(s.grad("a").unwrap().dims(), &[2, 3]);
        assert!(matches!(s.value("b"), Err(Error::UnknownParam(_))));
    }

    #[test]
    fn frozen_entries_ignore_gradients() {
        let mut s = ParamStore::new();
        s.insert("frozen", Tensor::zeros(&[2]), false).unwrap();
        s.insert("live", Tensor::zeros(&[2]), true).unwrap();
        let g = Tensor::full(&[2], 1.0);
        s.accumulate("frozen", &g).unwrap();
        s.accumulate("live", &g).unwrap();
        assert_eq!(s.grad("frozen").unwrap().sum(), 0.0);
        assert_eq!(s.grad("live").unwrap().sum(), 2.0);
        assert_eq!(s.trainable_names(), vec!["live".to_string()]);
    }
}

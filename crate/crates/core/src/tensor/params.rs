use std::collections::BTreeMap;

use super::{Scalar, Tensor2D};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor2D<T>,
    pub grad: Tensor2D<T>,
}

/// Named trainable tensors with their gradients, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Adds or replaces an entry; its gradient starts at zero.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2D<T>) {
        let grad = Tensor2D::zeros(value.rows(), value.cols());
        self.entries.insert(name.into(), Param { value, grad });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Consistency(format!("unknown parameter {name:?}")))
    }

    /// Value of a parameter the caller registered itself; a missing name is a programming error.
    pub fn value(&self, name: &str) -> &Tensor2D<T> {
        match self.entries.get(name) {
            Some(p) => &p.value,
            None => panic!("parameter {name:?} is not registered"),
        }
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor2D<T> {
        match self.entries.get_mut(name) {
            Some(p) => &mut p.value,
            None => panic!("parameter {name:?} is not registered"),
        }
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut Tensor2D<T> {
        match self.entries.get_mut(name) {
            Some(p) => &mut p.grad,
            None => panic!("parameter {name:?} is not registered"),
        }
    }

    pub fn grad(&self, name: &str) -> &Tensor2D<T> {
        &self.entries[name].grad
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(T::zero());
        }
    }

    /// Adds every gradient of `other` (same names and shapes) into `self`.
    pub fn accumulate_grads(&mut self, other: &Self) -> Result<()> {
        for (name, p) in &mut self.entries {
            let o = other.param(name)?;
            p.grad.add_assign(&o.grad)?;
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, s: T) {
        for p in self.entries.values_mut() {
            p.grad.scale(s);
        }
    }

    pub fn grad_norm(&self) -> T {
        self.entries
            .values()
            .map(|p| p.grad.sum_squares())
            .sum::<T>()
            .sqrt()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_grad_norm(&mut self, max_norm: T) -> T {
        let norm = self.grad_norm();
        if norm > max_norm && norm > T::zero() {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|p| p.value.is_finite() && p.grad.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.cast(),
                        },
                    )
                })
                .collect(),
        }
    }
}

//! Named parameter tensors with freeze support. A fresh graph is built per
//! step: [`ParamStore::leaves`] turns every tensor into a leaf [`Var`]
//! (frozen names get `requires_grad = false`, so backward never produces
//! gradients for them), and the optimizer reads gradients back off those
//! leaves by name.

use crate::autodiff::Var;
use crate::error::{AkvsrError, Result};
use crate::tensor::Tensor;
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| AkvsrError::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(slot) => {
                *slot = tensor;
                Ok(())
            }
            None => Err(AkvsrError::Contract(format!("unknown parameter {name:?}"))),
        }
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        if !self.tensors.contains_key(name) {
            return Err(AkvsrError::Contract(format!("cannot freeze unknown {name:?}")));
        }
        self.frozen.insert(name.to_string());
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    /// One leaf Var per parameter; deterministic (sorted-name) order.
    pub fn leaves(&self) -> BTreeMap<String, Var> {
        self.tensors
            .iter()
            .map(|(name, t)| {
                (
                    name.clone(),
                    Var::leaf(t.clone(), !self.frozen.contains(name)),
                )
            })
            .collect()
    }

    pub fn absorb(&mut self, other: ParamStore) {
        for (name, t) in other.tensors {
            self.tensors.insert(name, t);
        }
        self.frozen.extend(other.frozen);
    }
}

/// Helper view over the per-step leaves.
pub struct Leaves<'a> {
    map: &'a BTreeMap<String, Var>,
}

impl<'a> Leaves<'a> {
    pub fn new(map: &'a BTreeMap<String, Var>) -> Self {
        Leaves { map }
    }

    pub fn get(&self, name: &str) -> Var {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name:?}"))
            .clone()
    }
}

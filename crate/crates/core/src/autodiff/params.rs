use std::collections::HashMap;

use super::tape::{Gradients, NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

/// Node ids of a [`ParamStore`] recorded on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    ids: Vec<NodeId>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.index
            .get(name)
            .map(|&i| self.ids[i])
            .ok_or_else(|| Error::shape(format!("no parameter named `{name}`")))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        t.set_requires_grad(true);
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Appends every entry of `other`.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for (n, t) in other.entries {
            self.insert(n, t)?;
        }
        Ok(())
    }

    /// Keeps only entries whose name satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        ParamStore {
            entries: self.entries.iter().filter(|(n, _)| keep(n)).cloned().collect(),
        }
    }

    /// Records every parameter as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let ids: Vec<NodeId> = self.entries.iter().map(|(_, t)| tape.leaf(t)).collect();
        let index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Bound { ids, index }
    }

    /// Records every parameter as a constant (no gradients), for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let ids: Vec<NodeId> = self
            .entries
            .iter()
            .map(|(_, t)| {
                tape.constant(t.shape().to_vec(), t.data().to_vec())
                    .expect("tensor shape is consistent")
            })
            .collect();
        let index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Bound { ids, index }
    }

    /// Extracts per-parameter gradients of one sweep, in store order.
    /// Parameters the output does not depend on get zeros.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .zip(&bound.ids)
            .map(|((_, t), id)| grads.take(*id).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }

    /// Adds a gradient set (as returned by [`ParamStore::collect_grads`]) into each tensor's grad.
    pub fn accumulate_grads(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.entries.len() {
            return Err(Error::shape("gradient set does not match parameter store"));
        }
        for ((_, t), g) in self.entries.iter_mut().zip(grads) {
            t.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.clear_grad();
        }
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.entries
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.insert(n, t)?;
        }
        Ok(s)
    }
}

/// Sums gradient sets elementwise in slice order.
pub fn sum_grad_sets(sets: Vec<Vec<Vec<f64>>>) -> Option<Vec<Vec<f64>>> {
    let mut it = sets.into_iter();
    let mut total = it.next()?;
    for set in it {
        for (acc, g) in total.iter_mut().zip(set) {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    Some(total)
}

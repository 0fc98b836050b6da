//! Named, ordered parameter collections.

use std::collections::HashMap;

use crate::error::{EetError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Tensors keyed by name, iterated in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| EetError::config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut out = Self::new();
        for (n, t) in self.iter() {
            out.insert(n, Tensor::zeros(t.shape()));
        }
        out
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
    }

    /// `self += scale · other`, entry by entry.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) -> Result<()> {
        if !self.same_layout(other) {
            return Err(EetError::contract("parameter sets differ in layout"));
        }
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(other.entries.iter()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    /// Euclidean norm over every entry.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Registers every tensor as a parameter leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| graph.param(t.clone()))
            .collect();
        BoundParams {
            names: self.index.clone(),
            vars,
        }
    }
}

/// Graph leaves created by [`ParamSet::bind`].
pub struct BoundParams {
    names: HashMap<String, usize>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.names
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| EetError::config(format!("missing parameter `{name}`")))
    }

    /// Collects leaf gradients back into a set shaped like `layout`.
    pub fn gradients(&self, layout: &ParamSet, mut grads: Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for ((name, _), &v) in layout.entries.iter().zip(&self.vars) {
            out.insert(name.clone(), grads.take(v));
        }
        out
    }
}

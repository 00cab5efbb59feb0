//! Named parameter collections and their binding into a [`Graph`].

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::graph::{Gradients, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Ordered map from parameter name to tensor. Iteration order is the
/// lexicographic name order, which fixes the on-disk layout.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        assert!(!self.map.contains_key(&name), "duplicate parameter {name}");
        self.map.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.all_finite())
    }

    /// Moves every entry of `other` in, panicking on a name clash.
    pub fn merge(&mut self, other: ParamSet<T>) {
        for (k, v) in other.map {
            self.insert(k, v);
        }
    }

    /// Entries whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        Self { map: self.map.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect() }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Pushes every tensor into `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| {
                let var = if trainable { g.param(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Name → graph node mapping produced by [`ParamSet::bind`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("unbound parameter {name}"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Collects leaf gradients by name; parameters that received none get zeros.
    pub fn grads<T: Real>(&self, g: &Graph<T>, grads: &Gradients<T>) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (k, &v) in &self.vars {
            let t = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v)));
            out.insert(k.to_string(), t);
        }
        out
    }
}

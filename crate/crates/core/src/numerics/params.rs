//! Named parameter storage and the gradient-evaluation entry point.

use std::collections::BTreeMap;

use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Parameters keyed by name, iterated in lexicographic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

/// Gradient tensors keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn insert(&mut self, name: String, g: Tensor) {
        self.map.insert(name, g);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Elementwise `self += other`; missing entries are adopted.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (k, g) in &other.map {
            match self.map.get_mut(k) {
                Some(acc) => acc.add_assign(g)?,
                None => {
                    self.map.insert(k.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.map.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name.into(), Param { value, grad, trainable });
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn freeze_all(&mut self) {
        for p in self.params.values_mut() {
            p.trainable = false;
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Adds `grads` into the per-parameter gradient slots.
    pub fn accumulate_grads(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = self
                .get_mut(name)
                .ok_or_else(|| Error::config(format!("gradient for unknown `{name}`")))?;
            if p.trainable {
                p.grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    /// Snapshot of the gradient slots.
    pub fn grads(&self) -> Gradients {
        let mut out = Gradients::default();
        for (k, p) in &self.params {
            out.insert(k.clone(), p.grad.clone());
        }
        out
    }
}

/// Evaluates the scalar built by `build` and its reverse-mode gradients.
///
/// The returned [`Gradients`] has one entry per parameter in `params`;
/// frozen or unused parameters receive exact zeros.
pub fn evaluate_with_gradients<F>(params: &ParamStore, build: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&mut Graph) -> Result<Var>,
{
    let mut graph = Graph::new();
    let root = build(&mut graph)?;
    let loss = graph.value(root);
    if loss.len() != 1 {
        return Err(Error::config(format!(
            "loss must be scalar, got shape {:?}",
            loss.shape()
        )));
    }
    let loss = loss.item();
    if !loss.is_finite() {
        let (node, op) = graph.first_non_finite().unwrap_or((root.index(), "loss"));
        return Err(Error::Numerical {
            node,
            op,
            detail: format!("loss evaluated to {loss}"),
        });
    }
    let tracked = graph.backward(root)?;
    let mut grads = Gradients::default();
    for (name, p) in params.iter() {
        let g = match tracked.get(name) {
            Some(g) if p.trainable => g.clone(),
            _ => Tensor::zeros(p.value.shape()),
        };
        grads.insert(name.clone(), g);
    }
    Ok((loss, grads))
}

use alloc::string::String;
use alloc::vec::Vec;

use super::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S = f64> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
}

impl<S: Real> Default for ParamStore<S> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Result of a backward pass: gradients for every tape node and every
/// parameter that the loss depends on. Parameters the loss never touched
/// have no gradient (`None`), which the optimizer treats as "skip".
#[derive(Debug, Clone)]
pub struct Gradients<S = f64> {
    pub(crate) nodes: Vec<Option<Tensor<S>>>,
    pub(crate) params: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Gradients<S> {
    pub fn of(&self, var: super::Var) -> Option<&Tensor<S>> {
        self.nodes.get(var.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &[Option<Tensor<S>>] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Option<Tensor<S>>> {
        self.params
    }

    /// True if the parameter received a gradient with at least one non-zero entry.
    pub fn is_nonzero(&self, id: ParamId) -> bool {
        self.param(id).is_some_and(|g| g.data().iter().any(|v| *v != S::zero()))
    }
}

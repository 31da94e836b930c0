use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered, named parameter tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.push((name.into(), value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
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

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    /// Records every tensor as a differentiable leaf, in order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors().map(|t| tape.param(t.clone())).collect()
    }

    /// Records every tensor as a constant leaf, in order.
    pub fn bind_constant<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors().map(|t| tape.constant(t.clone())).collect()
    }

    /// Replaces all values, keeping names; shapes must match.
    pub fn set_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::contract("parameter count mismatch"));
        }
        for ((name, old), new) in self.entries.iter_mut().zip(values) {
            if old.shape() != new.shape() {
                return Err(Error::contract(format!(
                    "{name}: shape {:?} cannot take a value of shape {:?}",
                    old.shape(),
                    new.shape()
                )));
            }
            *old = new;
        }
        Ok(())
    }

    /// Copy with every name prefixed by `prefix.`.
    pub fn prefixed(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
                .collect(),
        }
    }

    /// Entries named `prefix.*`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        let lead = format!("{prefix}.");
        Self {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&lead).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ModelParams) {
        self.entries.extend(other.entries);
    }

    /// Bit patterns of every value, concatenated in order.
    pub fn bits(&self) -> Vec<u64> {
        self.tensors().flat_map(Tensor::bits).collect()
    }
}

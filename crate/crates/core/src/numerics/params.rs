use super::{Graph, Tensor, Var};
use crate::error::{format_err, Result};

/// Ordered, named collection of trainable tensors.
///
/// Models address their parameters by slot index; the names only matter for
/// checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Register every parameter as a leaf of `g`, returning the handles in
    /// slot order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().enumerate().map(|(i, t)| g.param(i, t.clone())).collect()
    }

    /// Gradients for the handles returned by [`ParamSet::bind`].
    pub fn grads(&self, g: &Graph, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|&v| g.grad(v)).collect()
    }

    /// Replace values from `(name, tensor)` pairs, requiring identical
    /// names and shapes in the same order.
    pub fn load(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.len() {
            return Err(format_err!("expected {} tensors, found {}", self.len(), entries.len()));
        }
        for (i, (name, t)) in entries.iter().enumerate() {
            if name != &self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(format_err!(
                    "tensor {} is {} {:?}, expected {} {:?}",
                    i,
                    name,
                    t.shape(),
                    self.names[i],
                    self.tensors[i].shape()
                ));
            }
        }
        for (dst, (_, t)) in self.tensors.iter_mut().zip(entries) {
            *dst = t.clone();
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, Tensor)> {
        self.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }
}

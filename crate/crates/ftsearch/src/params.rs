//! Ordered, named parameter collections.
//!
//! Construction order is fixed by the builders, which keeps seeded
//! initialization and optimizer state deterministic. Names use dotted
//! prefixes ("backbone.layer.2.w") so strategies can freeze by group.

use crate::error::{FtError, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn indices_with_prefix(&self, prefix: &str) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.names[i].starts_with(prefix))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn total_elems(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn elems_of(&self, idxs: &[usize]) -> usize {
        idxs.iter().map(|&i| self.tensors[i].numel()).sum()
    }

    /// Register every tensor as a tape leaf. `trainable[i]` controls whether
    /// the leaf is a gradient target this pass.
    pub fn register(&self, tape: &mut Tape, trainable: &[bool]) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.leaf(t.data.clone(), t.shape.clone(), trainable[i]))
            .collect()
    }

    pub fn register_all_trainable(&self, tape: &mut Tape) -> Vec<Var> {
        self.register(tape, &vec![true; self.len()])
    }

    pub fn register_all_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.register(tape, &vec![false; self.len()])
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.tensors.clone()
    }

    pub fn restore(&mut self, snap: &[Tensor]) {
        assert_eq!(snap.len(), self.tensors.len());
        self.tensors.clone_from_slice(snap);
    }

    /// Copy a named tensor in, checking the shape against the existing entry.
    pub fn set_named(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| FtError::Config(format!("unknown parameter {name}")))?;
        if data.len() != self.tensors[i].numel() {
            return Err(FtError::Shape {
                op: "ParamSet::set_named",
                lhs: self.tensors[i].shape.clone(),
                rhs: vec![data.len()],
            });
        }
        self.tensors[i].data = data;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_selection() {
        let mut p = ParamSet::new();
        p.add("backbone.w", Tensor::zeros(vec![2]));
        p.add("head.w", Tensor::zeros(vec![2]));
        p.add("backbone.b", Tensor::zeros(vec![1]));
        assert_eq!(p.indices_with_prefix("backbone."), vec![0, 2]);
        assert_eq!(p.total_elems(), 5);
    }
}

//! Named, ordered collections of trainable tensors.
//!
//! `ModelParams` is the single source of truth for a model's weights: the
//! optimizer walks it in order, checkpoints serialize it in order, and each
//! forward pass binds it onto a fresh tape. Paths are plain strings such as
//! `"gru.l0.w_z"`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Default)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a trainable tensor under `path`. Panics on duplicate paths;
    /// model builders own their namespace.
    pub fn insert(&mut self, path: impl Into<String>, mut tensor: Tensor) {
        let path = path.into();
        assert!(
            !self.index.contains_key(&path),
            "duplicate parameter path {path}"
        );
        tensor.set_requires_grad(true);
        self.index.insert(path.clone(), self.names.len());
        self.names.push(path);
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, path: &str) -> bool {
        self.index.contains_key(path)
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.index.get(path).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.index.get(path).copied().map(|i| &mut self.tensors[i])
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Global L2 norm over every gradient element.
    pub fn grad_l2_norm(&self) -> Real {
        let mut acc = 0.0;
        for t in &self.tensors {
            if let Some(g) = t.grad() {
                for &v in g {
                    acc += v * v;
                }
            }
        }
        acc.sqrt()
    }

    /// Registers every parameter on `tape` (in path order) and returns the
    /// name → Var binding for the forward pass.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut vars = Vec::with_capacity(self.len());
        for t in &self.tensors {
            vars.push(tape.param(t));
        }
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Adds the tape's post-backward adjoints into the master grad
    /// accumulators. Additive so several tapes (micro-batches) can merge.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (i, t) in self.tensors.iter_mut().enumerate() {
            if let Some(g) = tape.grad(bound.vars[i]) {
                t.accumulate_grad(g);
            }
        }
    }
}

/// Tape-bound view of a `ModelParams`, valid for one forward/backward pass.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Var for a parameter path. Panics on unknown paths: lookups use
    /// compile-time literals owned by the model builders.
    pub fn var(&self, path: &str) -> Var {
        let i = *self
            .index
            .get(path)
            .unwrap_or_else(|| panic!("unbound parameter path {path}"));
        self.vars[i]
    }

    pub fn try_var(&self, path: &str) -> Result<Var> {
        self.index
            .get(path)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("unbound parameter path {path}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_preserved() {
        let mut p = ModelParams::new();
        p.insert("b", Tensor::zeros(vec![2]));
        p.insert("a", Tensor::zeros(vec![3]));
        let names: Vec<&str> = p.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["b", "a"]);
        assert_eq!(p.get("a").unwrap().len(), 3);
    }

    #[test]
    fn bind_and_harvest_round_trip() {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let w = bound.var("w");
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        p.accumulate_grads(&tape, &bound);
        assert_eq!(p.get("w").unwrap().grad().unwrap(), &[1.0, 1.0]);
        // additive across tapes
        let mut tape2 = Tape::new();
        let bound2 = p.bind(&mut tape2);
        let w2 = bound2.var("w");
        let loss2 = tape2.sum(w2);
        tape2.backward(loss2).unwrap();
        p.accumulate_grads(&tape2, &bound2);
        assert_eq!(p.get("w").unwrap().grad().unwrap(), &[2.0, 2.0]);
        p.zero_grads();
        assert_eq!(p.get("w").unwrap().grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn grad_norm_is_global() {
        let mut p = ModelParams::new();
        p.insert("a", Tensor::zeros(vec![1]));
        p.insert("b", Tensor::zeros(vec![1]));
        p.get_mut("a").unwrap().accumulate_grad(&[3.0]);
        p.get_mut("b").unwrap().accumulate_grad(&[4.0]);
        assert!((p.grad_l2_norm() - 5.0).abs() < 1e-12);
    }
}

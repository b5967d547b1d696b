//! Named trainable parameters and their binding onto a tape.

use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Insertion-ordered parameter collection. Order is part of the checkpoint
/// format, so modules must register parameters deterministically.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.param(t)).collect())
    }

    /// Binds every parameter as a constant, for inference without gradients.
    pub fn bind_constant(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t)).collect())
    }

    /// Binds every parameter as a constant except `id`, which maps to
    /// `var`. Used to differentiate with respect to a single tensor.
    pub fn bind_replacing(&self, tape: &mut Tape, id: ParamId, var: Var) -> Bound {
        let mut b = self.bind_constant(tape);
        b.0[id.0] = var;
        b
    }

    pub fn accumulate(&mut self, grads: &Gradients, bound: &Bound) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            grads.accumulate_into(v, t);
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces values of the parameter called `name`; the shape must match.
    pub fn set_values(&mut self, name: &str, values: Tensor) -> Result<(), String> {
        let id = self.find(name).ok_or_else(|| format!("unknown parameter {name}"))?;
        let cur = &mut self.tensors[id.0];
        if cur.shape() != values.shape() {
            return Err(format!(
                "shape {:?} does not match expected {:?}",
                values.shape(),
                cur.shape()
            ));
        }
        cur.values_mut().copy_from_slice(values.values());
        cur.zero_grad();
        Ok(())
    }
}

/// Uniform initialization in `[-bound, bound]`.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, values).expect("positive dims")
}

/// He-uniform bound for layers followed by a rectifier.
pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// LeCun-uniform bound for linear or saturating layers.
pub fn lecun_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

//! Named parameter storage with paired gradients.

use super::{Tensor2D, TensorError};
use crate::rng::SplitMix64;
use std::collections::HashMap;

/// A named learnable tensor and its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor2D,
    pub grad: Tensor2D,
}

/// Ordered, name-unique parameter set. Iteration order is insertion order,
/// which keeps optimizer updates and checkpoints deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor2D) -> Result<usize, TensorError> {
        if self.by_name.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let (r, c) = value.shape();
        let slot = self.params.len();
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: Tensor2D::zeros(r, c),
        });
        self.by_name.insert(name.to_string(), slot);
        Ok(slot)
    }

    /// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] for an
    /// `fan_in x fan_out` weight used as `x @ W`.
    pub fn insert_linear_init(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut SplitMix64,
    ) -> Result<usize, TensorError> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        self.insert(name, Tensor2D::from_vec(fan_in, fan_out, data)?)
    }

    pub fn slot(&self, name: &str) -> Result<usize, TensorError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor2D, TensorError> {
        Ok(&self.params[self.slot(name)?].value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor2D, TensorError> {
        Ok(&self.params[self.slot(name)?].grad)
    }

    pub fn value_at(&self, slot: usize) -> &Tensor2D {
        &self.params[slot].value
    }

    pub fn set_value(&mut self, name: &str, value: Tensor2D) -> Result<(), TensorError> {
        let slot = self.slot(name)?;
        if self.params[slot].value.shape() != value.shape() {
            let (r, c) = value.shape();
            return Err(TensorError::BadShape {
                op: "set_value",
                expected: "tensor of the parameter's shape",
                rows: r,
                cols: c,
            });
        }
        self.params[slot].value = value;
        Ok(())
    }

    pub fn accumulate_grad(&mut self, slot: usize, delta: &Tensor2D) {
        let grad = &mut self.params[slot].grad;
        debug_assert_eq!(grad.shape(), delta.shape());
        for (g, d) in grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Nudge one scalar entry of a parameter in place (finite differences).
    pub fn perturb(&mut self, slot: usize, index: usize, delta: f64) {
        self.params[slot].value.data_mut()[index] += delta;
    }

    /// Gradient-descent step with a per-parameter learning rate.
    pub fn sgd_step(&mut self, lr_for: impl Fn(&str) -> f64) {
        for p in &mut self.params {
            let lr = lr_for(&p.name);
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= lr * g;
            }
        }
    }
}

//! Adam optimizer over a named, ordered parameter set.

use super::{Elem, Tape, Tensor, Var};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Ordered collection of named parameter tensors. The order is the identity
/// used by [`Adam`] moments, gradient vectors, and checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet<T = f64> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Elem> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    /// Register a parameter; returns its stable index.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.entries.push((name.into(), t));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total scalar count across all parameters.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Record every parameter as a gradient-requiring leaf, in order.
    pub fn leaf_all(&self, tape: &mut Tape<T>) -> Result<Vec<Var>> {
        self.entries
            .iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect()
    }
}

/// Adam with bias correction. Moments are allocated lazily on the first step
/// and are keyed by parameter order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam<T = f64> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Elem> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters; `grads[i]` must match `params[i]` in
    /// shape and the two slices must have equal length.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[&Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::contract(format!(
                "adam got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.m.is_empty() {
            self.m = (0..params.len())
                .map(|i| Tensor::zeros(params.get(i).shape()))
                .collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let bc1 = T::of(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        for i in 0..params.len() {
            let g = grads[i];
            if g.shape() != params.get(i).shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: params.get(i).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let gd = g.data();
            let (md, vd) = (self.m[i].data_mut(), self.v[i].data_mut());
            let pd = params.get_mut(i).data_mut();
            for k in 0..gd.len() {
                md[k] = b1 * md[k] + (one - b1) * gd[k];
                vd[k] = b2 * vd[k] + (one - b2) * gd[k] * gd[k];
                let mhat = md[k] / bc1;
                let vhat = vd[k] / bc2;
                pd[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

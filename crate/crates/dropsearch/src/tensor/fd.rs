//! Central finite-difference gradient checking (64-bit only).
//!
//! The reverse-mode gradients in this crate are validated against
//! `(f(x+h) − f(x−h)) / 2h`; the helpers here are used by the test suite and
//! by the acceptance harness, so they live in the library proper.

use super::{ParamSet, Tensor};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with a unit floor, so near-zero pairs compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()))
}

/// Worst-case `rel_err` across paired tensors.
pub fn max_rel_err(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            worst = worst.max(rel_err(x, y));
        }
    }
    worst
}

/// Central finite differences of a scalar loss with respect to every entry of
/// every parameter. `f` must be a pure function of the parameter set.
pub fn fd_param_grads(
    params: &ParamSet<f64>,
    mut f: impl FnMut(&ParamSet<f64>) -> Result<f64>,
    step: f64,
) -> Result<Vec<Tensor<f64>>> {
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut g = Tensor::zeros(params.get(i).shape());
        for k in 0..g.len() {
            let orig = params.get(i).data()[k];
            work.get_mut(i).data_mut()[k] = orig + step;
            let up = f(&work)?;
            work.get_mut(i).data_mut()[k] = orig - step;
            let down = f(&work)?;
            work.get_mut(i).data_mut()[k] = orig;
            g.data_mut()[k] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

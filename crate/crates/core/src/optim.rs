//! Adam with bias correction, the projected dual ascent step for the
//! constraint multiplier, and box projections.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient at parameter index {index}")]
    NonFiniteGradient { index: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One Adam update in place. `params` and `grads` must match the state
    /// shape.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), OptimError> {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(OptimError::NonFiniteGradient { index });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Multiplier state for the primal-dual scheme. `lambda` stays nonnegative
/// through the projected update; `eps_tol` is the constraint tolerance the
/// residual sum is compared against.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DualState {
    pub lambda: f64,
    pub alpha: f64,
    pub eps_tol: f64,
}

impl DualState {
    pub fn new(lambda: f64, alpha: f64, eps_tol: f64) -> Self {
        assert!(lambda >= 0.0 && alpha > 0.0 && eps_tol > 0.0);
        DualState { lambda, alpha, eps_tol }
    }

    /// lambda <- [lambda + alpha (residual_sum - eps)]_+
    pub fn step(&mut self, residual_sum: f64) {
        debug_assert!(residual_sum >= 0.0);
        self.lambda = (self.lambda + self.alpha * (residual_sum - self.eps_tol)).max(0.0);
    }
}

/// Elementwise clamp to [lo, hi].
pub fn project_box(values: &mut [f64], lo: f64, hi: f64) {
    assert!(lo <= hi);
    for v in values.iter_mut() {
        *v = v.clamp(lo, hi);
    }
}

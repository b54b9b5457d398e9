//! Differentiation substrate: forward-mode dual numbers and a reverse-mode
//! tape over a generic scalar type.
//!
//! The tape element type is generic so that a reverse sweep can run over
//! dual-valued nodes. Sweeping a dual-valued tape propagates both a partial
//! derivative and its forward-mode directional derivative at once, which is
//! what the solver uses to differentiate residual terms containing time
//! derivatives of trajectory networks, and force terms that are themselves
//! spatial gradients of an energy.

mod dual;
mod tape;

pub use dual::{Dual, D1, D2};
pub use tape::{Tape, Var};

use std::ops::{Add, Div, Mul, Neg, Sub};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("non-finite value in forward pass at node {node} (op {op})")]
    NonFinite { node: usize, op: &'static str },
}

/// Scalar algebra shared by plain floats, dual numbers and tape variables.
///
/// The primitive set is fixed to what the capacitance, field, KDE and
/// network code needs: arithmetic, tanh, exp, sqrt, erf, integer powers and
/// a clamp with the zero-at-the-bound subgradient convention.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Primal value, used for branching only (never differentiated).
    fn val(&self) -> f64;
    /// Lift a constant into the same context as `self` (same tape, zero
    /// derivative part).
    fn lift(&self, c: f64) -> Self;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn erf(self) -> Self;
    fn powi(self, k: i32) -> Self;
    /// Clamp to `[lo, hi]`; at or beyond a bound the derivative is zero.
    fn clamp_sub(self, lo: f64, hi: f64) -> Self;
}

/// Plain scalars that can be constructed without context (everything except
/// tape variables). Tapes are parameterized over these.
pub trait PlainReal: Real + 'static + Send + Sync {
    fn from_f64(c: f64) -> Self;
    fn one() -> Self {
        Self::from_f64(1.0)
    }
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
}

impl Real for f64 {
    #[inline]
    fn val(&self) -> f64 {
        *self
    }
    #[inline]
    fn lift(&self, c: f64) -> Self {
        c
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
    #[inline]
    fn powi(self, k: i32) -> Self {
        f64::powi(self, k)
    }
    #[inline]
    fn clamp_sub(self, lo: f64, hi: f64) -> Self {
        self.clamp(lo, hi)
    }
}

impl PlainReal for f64 {
    #[inline]
    fn from_f64(c: f64) -> Self {
        c
    }
}

/// Directional derivative of `f` at `x` along `v` (forward mode).
pub fn jvp<F>(f: F, x: &[f64], v: &[f64]) -> f64
where
    F: Fn(&[D1]) -> D1,
{
    assert_eq!(x.len(), v.len());
    let inputs: Vec<D1> = x
        .iter()
        .zip(v)
        .map(|(&xi, &vi)| D1::new(xi, [vi]))
        .collect();
    f(&inputs).eps[0]
}

/// Gradient of a recorded scalar function via a single reverse sweep.
pub fn grad<F>(f: F, inputs: &[f64]) -> Result<Vec<f64>, DiffError>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::<f64>::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|&x| tape.var(x)).collect();
    let out = f(&vars);
    let adj = tape.sweep(out)?;
    Ok(vars.iter().map(|v| adj[v.index()]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fd_grad<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        for i in 0..x.len() {
            let h = 1e-6 * x[i].abs().max(1.0);
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            g[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn grad_square() {
        let g = grad(|w| w[0] * w[0], &[3.0]).unwrap();
        assert_relative_eq!(g[0], 6.0, max_relative = 1e-12);
    }

    #[test]
    fn grad_tanh_product() {
        // f(w1, w2) = tanh(w1 w2) at (0.5, -1)
        let g = grad(|w| (w[0] * w[1]).tanh(), &[0.5, -1.0]).unwrap();
        let s = 1.0 - f64::tanh(-0.5).powi(2);
        assert_relative_eq!(g[0], -s, max_relative = 1e-12);
        assert_relative_eq!(g[1], 0.5 * s, max_relative = 1e-12);
    }

    #[test]
    fn grad_matches_fd_on_mlp_loss() {
        // random-ish 20-parameter two-layer scalar net, squared output
        let params: Vec<f64> = (0..20).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.5).collect();
        let f = |w: &[f64]| -> f64 {
            let x = 0.37;
            let mut h = [0.0; 4];
            for j in 0..4 {
                h[j] = f64::tanh(w[j] * x + w[4 + j]);
            }
            let mut y = w[16];
            for j in 0..4 {
                y += w[8 + j] * h[j] + w[12 + j] * h[j] * h[j];
            }
            (y - 0.2) * (y - 0.2) + w[17].exp() * 1e-3 + w[18] * w[19]
        };
        fn fr<'t>(w: &[Var<'t, f64>]) -> Var<'t, f64> {
            let x = w[0].lift(0.37);
            let mut h = Vec::new();
            for j in 0..4 {
                h.push((w[j] * x + w[4 + j]).tanh());
            }
            let mut y = w[16];
            for j in 0..4 {
                y = y + w[8 + j] * h[j] + w[12 + j] * h[j] * h[j];
            }
            let d = y - w[0].lift(0.2);
            d * d + w[17].exp() * w[0].lift(1e-3) + w[18] * w[19]
        }
        let ga = grad(fr, &params).unwrap();
        let gf = fd_grad(f, &params);
        for i in 0..20 {
            assert_relative_eq!(ga[i], gf[i], max_relative = 1e-5, epsilon = 1e-9);
        }
    }

    #[test]
    fn jvp_identity_and_cube() {
        let v = jvp(|x| x[0], &[5.0], &[2.5]);
        assert_relative_eq!(v, 2.5);
        let d = jvp(|x| x[0] * x[0] * x[0], &[2.0], &[1.0]);
        assert_relative_eq!(d, 12.0, max_relative = 1e-12);
    }

    #[test]
    fn nan_in_forward_pass_is_reported() {
        let tape = Tape::<f64>::new();
        let x = tape.var(-1.0);
        let y = x.sqrt();
        let err = tape.sweep(y).unwrap_err();
        match err {
            DiffError::NonFinite { op, .. } => assert_eq!(op, "sqrt"),
        }
    }

    #[test]
    fn dual_tape_gives_gradient_of_directional_derivative() {
        // y(t; w) = w0 * tanh(w1 * t); check d/dw of dy/dt against FD.
        let w = [0.8, -1.3];
        let t0 = 0.3;
        let ydot = |w: &[f64], t: f64| -> f64 {
            // analytic dy/dt
            w[0] * w[1] * (1.0 - f64::tanh(w[1] * t).powi(2))
        };
        let tape = Tape::<D1>::new();
        let vw: Vec<Var<D1>> = w.iter().map(|&wi| tape.var(D1::new(wi, [0.0]))).collect();
        let t = tape.constant(D1::new(t0, [1.0]));
        let y = vw[0] * (vw[1] * t).tanh();
        let adj = tape.sweep(y).unwrap();
        for i in 0..2 {
            let h = 1e-6;
            let mut wp = w;
            let mut wm = w;
            wp[i] += h;
            wm[i] -= h;
            let fd = (ydot(&wp, t0) - ydot(&wm, t0)) / (2.0 * h);
            assert_relative_eq!(adj[vw[i].index()].eps[0], fd, max_relative = 1e-4, epsilon = 1e-10);
        }
    }
}

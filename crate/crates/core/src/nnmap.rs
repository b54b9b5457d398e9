//! One-hidden-layer tanh networks used for the potential map V(y, t) and
//! the per-axis trajectory bundles, with generic-scalar evaluation so the
//! same forward pass runs on plain floats, dual numbers or tape variables.

use crate::diffengine::{Real, D1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("network dimensions must be positive (got {0}x{1}x{2})")]
    DegenerateShape(usize, usize, usize),
    #[error("input width {got} does not match in_dim {expected}")]
    InputWidth { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl MlpShape {
    pub fn new(in_dim: usize, hidden_dim: usize, out_dim: usize) -> Result<Self, NnError> {
        if in_dim == 0 || hidden_dim == 0 || out_dim == 0 {
            return Err(NnError::DegenerateShape(in_dim, hidden_dim, out_dim));
        }
        Ok(MlpShape { in_dim, hidden_dim, out_dim })
    }

    /// hidden*(in+1) + out*(hidden+1)
    pub fn param_count(&self) -> usize {
        self.hidden_dim * (self.in_dim + 1) + self.out_dim * (self.hidden_dim + 1)
    }

    // flat layout: W1 (hidden x in, row-major) | b1 | W2 (out x hidden) | b2
    fn w1(&self) -> std::ops::Range<usize> {
        0..self.hidden_dim * self.in_dim
    }
    fn b1(&self) -> std::ops::Range<usize> {
        let s = self.hidden_dim * self.in_dim;
        s..s + self.hidden_dim
    }
    fn w2(&self) -> std::ops::Range<usize> {
        let s = self.hidden_dim * (self.in_dim + 1);
        s..s + self.out_dim * self.hidden_dim
    }
    fn b2(&self) -> std::ops::Range<usize> {
        let s = self.hidden_dim * (self.in_dim + 1) + self.out_dim * self.hidden_dim;
        s..s + self.out_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OutputTransform {
    Identity,
    /// Hard clip to +-bound; gradients vanish at the bound.
    Clip { bound: f64 },
    /// Multiply by `scale`, then clip to +-bound.
    ScaleClip { scale: f64, bound: f64 },
}

impl OutputTransform {
    fn apply<S: Real>(&self, y: S) -> S {
        match *self {
            OutputTransform::Identity => y,
            OutputTransform::Clip { bound } => y.clamp_sub(-bound, bound),
            OutputTransform::ScaleClip { scale, bound } => {
                (y * y.lift(scale)).clamp_sub(-bound, bound)
            }
        }
    }
}

/// Two affine layers with a tanh in between; parameters live in one flat
/// vector so the optimizer and the tape can treat them uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub shape: MlpShape,
    pub transform: OutputTransform,
    pub params: Vec<f64>,
}

/// out = transform(W2 tanh(W1 in + b1) + b2), evaluated over any scalar.
/// `params` may be plain floats or tape variables for the same flat layout.
pub fn forward_slice<S: Real>(
    shape: MlpShape,
    transform: OutputTransform,
    params: &[S],
    input: &[S],
    out: &mut Vec<S>,
) {
    debug_assert_eq!(input.len(), shape.in_dim);
    debug_assert_eq!(params.len(), shape.param_count());
    let w1 = &params[shape.w1()];
    let b1 = &params[shape.b1()];
    let w2 = &params[shape.w2()];
    let b2 = &params[shape.b2()];

    let mut hidden = Vec::with_capacity(shape.hidden_dim);
    for h in 0..shape.hidden_dim {
        let mut acc = b1[h];
        for (wi, xi) in w1[h * shape.in_dim..(h + 1) * shape.in_dim].iter().zip(input) {
            acc = acc + *wi * *xi;
        }
        hidden.push(acc.tanh());
    }
    out.clear();
    for o in 0..shape.out_dim {
        let mut acc = b2[o];
        for (wi, hi) in w2[o * shape.hidden_dim..(o + 1) * shape.hidden_dim].iter().zip(&hidden) {
            acc = acc + *wi * *hi;
        }
        out.push(transform.apply(acc));
    }
}

/// Pre-transform output (used where the time derivative of the raw
/// trajectory output is wanted).
pub fn forward_slice_raw<S: Real>(shape: MlpShape, params: &[S], input: &[S], out: &mut Vec<S>) {
    forward_slice(shape, OutputTransform::Identity, params, input, out)
}

impl Mlp {
    /// Weights drawn from uniform(-s, s) with s = 1/sqrt(fan_in) per layer;
    /// deterministic for a fixed seed. `output_gain` scales the second-layer
    /// draw (near-zero maps start from no actuation).
    pub fn init(
        shape: MlpShape,
        transform: OutputTransform,
        seed: u64,
        output_gain: f64,
    ) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = vec![0.0; shape.param_count()];
        let s1 = 1.0 / (shape.in_dim as f64).sqrt();
        let s2 = output_gain / (shape.hidden_dim as f64).sqrt();
        for i in shape.w1() {
            params[i] = rng.gen_range(-s1..s1);
        }
        for i in shape.b1() {
            params[i] = rng.gen_range(-s1..s1);
        }
        for i in shape.w2() {
            params[i] = rng.gen_range(-s2..s2);
        }
        // b2 left at zero
        Mlp { shape, transform, params }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        if input.len() != self.shape.in_dim {
            return Err(NnError::InputWidth { expected: self.shape.in_dim, got: input.len() });
        }
        let mut out = Vec::new();
        forward_slice(self.shape, self.transform, &self.params, input, &mut out);
        Ok(out)
    }

    /// Row-independent batch evaluation; bit-identical to per-row calls.
    pub fn forward_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, NnError> {
        rows.iter().map(|r| self.forward(r)).collect()
    }

    /// d(raw output)/dt for a time-input network (in_dim == 1), via a
    /// forward-mode pass.
    pub fn time_derivative(&self, t: f64) -> Result<Vec<f64>, NnError> {
        if self.shape.in_dim != 1 {
            return Err(NnError::InputWidth { expected: 1, got: self.shape.in_dim });
        }
        let params: Vec<D1> = self.params.iter().map(|&p| D1::constant(p)).collect();
        let input = [D1::seeded(t, 0)];
        let mut out = Vec::new();
        forward_slice_raw(self.shape, &params, &input, &mut out);
        Ok(out.iter().map(|d| d.eps[0]).collect())
    }

    /// Shift the output biases so that the raw forward pass at `input`
    /// reproduces `targets` exactly (the trajectory-bundle calibration at
    /// t = 0; exact because b2 enters affinely).
    pub fn calibrate_outputs(&mut self, input: &[f64], targets: &[f64]) -> Result<(), NnError> {
        assert_eq!(targets.len(), self.shape.out_dim);
        let mut current = Vec::new();
        if input.len() != self.shape.in_dim {
            return Err(NnError::InputWidth { expected: self.shape.in_dim, got: input.len() });
        }
        forward_slice_raw(self.shape, &self.params, input, &mut current);
        let b2 = self.shape.b2();
        for (i, (cur, tgt)) in current.iter().zip(targets).enumerate() {
            self.params[b2.start + i] += tgt - cur;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

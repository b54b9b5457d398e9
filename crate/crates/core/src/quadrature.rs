//! Gauss-Hermite nodes and weights for the physicists' weight e^{-y^2}.

use thiserror::Error;

pub const SQRT_PI: f64 = 1.772_453_850_905_516;

#[derive(Debug, Error)]
pub enum QuadratureError {
    #[error("quadrature order must be in 1..=64, got {0}")]
    OrderOutOfRange(usize),
}

/// Nodes are the roots of the order-n Hermite polynomial, strictly
/// increasing and symmetric about zero; weights are positive and sum
/// to sqrt(pi).
#[derive(Debug, Clone, PartialEq)]
pub struct GHRule {
    order: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GHRule {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Approximate the integral of f(y) e^{-y^2} over the real line.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&y, &w)| w * f(y))
            .sum()
    }
}

/// Orthonormal Hermite recurrence (weight e^{-y^2}): value of p_0..p_n at y.
/// Returns (p_{n-1}(y), p_n(y)).
fn hermite_pair(n: usize, y: f64) -> (f64, f64) {
    let mut pm = 0.0; // p_{k-1}
    let mut p = std::f64::consts::PI.powf(-0.25); // p_0
    for k in 0..n {
        let kf = k as f64;
        let next = y * (2.0 / (kf + 1.0)).sqrt() * p - (kf / (kf + 1.0)).sqrt() * pm;
        pm = p;
        p = next;
    }
    (pm, p)
}

fn hermite_value(n: usize, y: f64) -> f64 {
    hermite_pair(n, y).1
}

/// Root of p_k in (lo, hi), bracketing by bisection then a Newton polish.
/// p_k' = sqrt(2k) p_{k-1}.
fn refine_root(k: usize, mut lo: f64, mut hi: f64) -> f64 {
    let flo = hermite_value(k, lo);
    debug_assert!(flo * hermite_value(k, hi) <= 0.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let fm = hermite_value(k, mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm > 0.0) == (flo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut y = 0.5 * (lo + hi);
    for _ in 0..4 {
        let (pm, p) = hermite_pair(k, y);
        let dp = (2.0 * k as f64).sqrt() * pm;
        if dp != 0.0 {
            let step = p / dp;
            let y_new = y - step;
            if y_new.is_finite() {
                y = y_new;
            }
        }
    }
    y
}

/// Gauss-Hermite rule of the given order, computed by building the root
/// ladder of the orthonormal Hermite recurrence (the roots of consecutive
/// orthogonal polynomials interlace) and taking weights from the
/// Christoffel sum w_i = 1 / sum_{k<n} p_k(y_i)^2.
pub fn gauss_hermite(n: usize) -> Result<GHRule, QuadratureError> {
    if !(1..=64).contains(&n) {
        return Err(QuadratureError::OrderOutOfRange(n));
    }
    let mut roots: Vec<f64> = vec![0.0]; // roots of p_1
    for k in 2..=n {
        let bound = (2.0 * k as f64 + 1.0).sqrt() + 1.0;
        let mut brackets = Vec::with_capacity(k + 1);
        brackets.push(-bound);
        brackets.extend_from_slice(&roots);
        brackets.push(bound);
        let mut next = Vec::with_capacity(k);
        for w in brackets.windows(2) {
            next.push(refine_root(k, w[0], w[1]));
        }
        roots = next;
    }

    // Enforce exact symmetry about the origin.
    let m = roots.len();
    for i in 0..m / 2 {
        let s = 0.5 * (roots[m - 1 - i] - roots[i]);
        roots[i] = -s;
        roots[m - 1 - i] = s;
    }
    if m % 2 == 1 {
        roots[m / 2] = 0.0;
    }

    let mut weights = Vec::with_capacity(m);
    for &y in &roots {
        let mut sum = 0.0;
        let mut pm = 0.0;
        let mut p = std::f64::consts::PI.powf(-0.25);
        for k in 0..n {
            sum += p * p;
            let kf = k as f64;
            let next = y * (2.0 / (kf + 1.0)).sqrt() * p - (kf / (kf + 1.0)).sqrt() * pm;
            pm = p;
            p = next;
        }
        weights.push(1.0 / sum);
    }
    for i in 0..m / 2 {
        let w = 0.5 * (weights[i] + weights[m - 1 - i]);
        weights[i] = w;
        weights[m - 1 - i] = w;
    }

    Ok(GHRule { order: n, nodes: roots, weights })
}

/// Analytic moment of y^k under the weight e^{-y^2}: zero for odd k,
/// (k-1)!! sqrt(pi) / 2^{k/2} for even k.
pub fn gaussian_weight_moment(k: usize) -> f64 {
    if k % 2 == 1 {
        return 0.0;
    }
    let mut dfact = 1.0;
    let mut i = k as i64 - 1;
    while i >= 2 {
        dfact *= i as f64;
        i -= 2;
    }
    dfact * SQRT_PI / 2f64.powi(k as i32 / 2)
}

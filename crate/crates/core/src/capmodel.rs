//! Error-function parameterization of the electrode-particle capacitance,
//! its least-squares fit, and the synthetic sample generator that stands in
//! for electrostatic simulation data.
//!
//! C(xi) = sum_i a_i [erf((xi + delta)/c_i) - erf((xi - delta)/c_i)], where
//! delta is half the electrode pitch. For a single term this is exactly the
//! un-normalized window integral of a Gaussian with sigma = c / sqrt(2),
//! which is what the field module's quadrature exploits.

use crate::diffengine::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CapError {
    #[error("fit needs at least {needed} samples for {terms} terms, got {got}")]
    TooFewSamples { needed: usize, terms: usize, got: usize },
    #[error("fit did not converge after {iterations} iterations (rms {rms:.3e})")]
    NonConvergence {
        iterations: usize,
        rms: f64,
        best: CapacitanceModel,
    },
    #[error("term count must be positive")]
    ZeroTerms,
    #[error("csv parse error at line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapTerm {
    pub a: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacitanceModel {
    pub terms: Vec<CapTerm>,
    pub delta: f64,
}

impl CapacitanceModel {
    pub fn single(a: f64, c: f64, delta: f64) -> Self {
        assert!(c > 0.0 && delta > 0.0, "length scales must be positive");
        CapacitanceModel { terms: vec![CapTerm { a, c }], delta }
    }

    /// Gaussian width of the single-term probabilistic reading,
    /// sigma = c / sqrt(2).
    pub fn sigma(&self) -> f64 {
        self.terms[0].c / 2f64.sqrt()
    }

    pub fn eval_1d(&self, xi: f64) -> f64 {
        self.eval_1d_g(xi)
    }

    pub fn eval_1d_g<S: Real>(&self, xi: S) -> S {
        let mut total = xi.lift(0.0);
        for term in &self.terms {
            let plus = (xi + xi.lift(self.delta)) / xi.lift(term.c);
            let minus = (xi - xi.lift(self.delta)) / xi.lift(term.c);
            total = total + xi.lift(term.a) * (plus.erf() - minus.erf());
        }
        total
    }

    pub fn eval_2d(&self, x: [f64; 2], y_electrode: [f64; 2]) -> f64 {
        self.eval_2d_g(x, y_electrode)
    }

    /// Radial extension: the 1D model evaluated at the Euclidean distance to
    /// the electrode. C is even in the distance, so right at the electrode
    /// center the square root's infinite slope is removable; an even Taylor
    /// branch C(0) + C''(0)/2 * xi^2 keeps derivatives finite there (the
    /// switchover at xi = 1e-6 is accurate to O(xi^4) ~ 1e-24).
    pub fn eval_2d_g<S: Real>(&self, x: [S; 2], y_electrode: [f64; 2]) -> S {
        let dx = x[0] - x[0].lift(y_electrode[0]);
        let dy = x[1] - x[1].lift(y_electrode[1]);
        let q = dx * dx + dy * dy;
        if q.val() < 1e-12 {
            q.lift(self.eval_1d(0.0)) + q * q.lift(0.5 * self.second_derivative_at_zero())
        } else {
            self.eval_1d_g(q.sqrt())
        }
    }

    /// C''(0) = -sum_i 8 a_i delta exp(-delta^2/c_i^2) / (sqrt(pi) c_i^3).
    fn second_derivative_at_zero(&self) -> f64 {
        let sqrt_pi = std::f64::consts::PI.sqrt();
        self.terms
            .iter()
            .map(|t| {
                let r = self.delta / t.c;
                -8.0 * t.a * self.delta * (-r * r).exp() / (sqrt_pi * t.c * t.c * t.c)
            })
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub a: f64,
    pub c: f64,
    pub delta: f64,
    pub noise_rel: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapacitanceSamples {
    pub positions: Vec<f64>,
    pub values: Vec<f64>,
    pub metadata: Option<SynthMeta>,
}

impl CapacitanceSamples {
    pub fn new(positions: Vec<f64>, values: Vec<f64>) -> Self {
        assert_eq!(positions.len(), values.len());
        assert!(
            positions.windows(2).all(|w| w[0] < w[1]),
            "positions must be strictly increasing"
        );
        CapacitanceSamples { positions, values, metadata: None }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "xi,capacitance")?;
        for (xi, v) in self.positions.iter().zip(&self.values) {
            writeln!(w, "{},{}", xi, v)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, CapError> {
        let mut positions = Vec::new();
        let mut values = Vec::new();
        let mut lines = r.lines().enumerate();
        match lines.next() {
            Some((_, Ok(header))) if header.trim() == "xi,capacitance" => {}
            Some((_, Ok(header))) => {
                return Err(CapError::Csv {
                    line: 1,
                    message: format!("expected header 'xi,capacitance', got '{}'", header.trim()),
                })
            }
            Some((_, Err(e))) => return Err(CapError::Io(e)),
            None => {
                return Err(CapError::Csv { line: 1, message: "empty file".into() });
            }
        }
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.splitn(2, ',');
            let parse = |s: Option<&str>, what: &str| -> Result<f64, CapError> {
                s.map(str::trim)
                    .ok_or_else(|| CapError::Csv {
                        line: i + 1,
                        message: format!("missing {what} field"),
                    })?
                    .parse()
                    .map_err(|e| CapError::Csv {
                        line: i + 1,
                        message: format!("bad {what}: {e}"),
                    })
            };
            let xi = parse(fields.next(), "xi")?;
            let v = parse(fields.next(), "capacitance")?;
            if let Some(&prev) = positions.last() {
                if xi <= prev {
                    return Err(CapError::Csv {
                        line: i + 1,
                        message: format!("positions must be strictly increasing ({xi} after {prev})"),
                    });
                }
            }
            positions.push(xi);
            values.push(v);
        }
        if positions.is_empty() {
            return Err(CapError::Csv { line: 1, message: "no sample rows".into() });
        }
        Ok(CapacitanceSamples { positions, values, metadata: None })
    }
}

/// Single-term samples with optional zero-mean relative Gaussian noise.
/// Deterministic for a fixed seed.
pub fn synth_samples(
    a: f64,
    c: f64,
    delta: f64,
    grid: &[f64],
    noise_rel: f64,
    seed: u64,
) -> CapacitanceSamples {
    assert!(c > 0.0 && delta > 0.0, "length scales must be positive");
    let model = CapacitanceModel::single(a, c, delta);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let values: Vec<f64> = grid
        .iter()
        .map(|&xi| {
            let v = model.eval_1d(xi);
            if noise_rel > 0.0 {
                // Box-Muller; rand's normal distribution lives in rand_distr,
                // and two uniforms are all we need here
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen();
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                v * (1.0 + noise_rel * z)
            } else {
                v
            }
        })
        .collect();
    CapacitanceSamples {
        positions: grid.to_vec(),
        values,
        metadata: Some(SynthMeta { a, c, delta, noise_rel, seed }),
    }
}

const FIT_MAX_ITERS: usize = 200;

/// Levenberg-Marquardt on (a_i, log c_i); the log keeps every c_i positive.
/// Initial iterate a = max/2, c = delta (staggered for multi-term fits).
pub fn fit(
    samples: &CapacitanceSamples,
    m: usize,
    delta: f64,
) -> Result<CapacitanceModel, CapError> {
    if m == 0 {
        return Err(CapError::ZeroTerms);
    }
    let needed = 2 * m + 1;
    if samples.len() < needed {
        return Err(CapError::TooFewSamples { needed, terms: m, got: samples.len() });
    }

    let vmax = samples.values.iter().cloned().fold(0.0f64, f64::max);
    let mut params = Vec::with_capacity(2 * m);
    for i in 0..m {
        params.push(vmax / 2.0 / m as f64);
        params.push((delta * (1.0 + i as f64)).ln());
    }

    let model_of = |p: &[f64]| CapacitanceModel {
        terms: (0..m)
            .map(|i| CapTerm { a: p[2 * i], c: p[2 * i + 1].exp() })
            .collect(),
        delta,
    };
    let residuals = |p: &[f64]| -> Vec<f64> {
        let model = model_of(p);
        samples
            .positions
            .iter()
            .zip(&samples.values)
            .map(|(&xi, &v)| model.eval_1d(xi) - v)
            .collect()
    };
    let rms = |r: &[f64]| (r.iter().map(|e| e * e).sum::<f64>() / r.len() as f64).sqrt();

    let np = 2 * m;
    let mut lambda = 1e-3;
    let mut r = residuals(&params);
    let mut cost = r.iter().map(|e| e * e).sum::<f64>();
    for _ in 0..FIT_MAX_ITERS {
        // Jacobian via one forward-mode pass per parameter
        let mut jac = vec![vec![0.0; np]; samples.len()];
        for j in 0..np {
            for (row, (&xi, _)) in jac.iter_mut().zip(samples.positions.iter().zip(&samples.values))
            {
                use crate::diffengine::D1;
                let p_dual: Vec<D1> = params
                    .iter()
                    .enumerate()
                    .map(|(k, &pk)| if k == j { D1::seeded(pk, 0) } else { D1::constant(pk) })
                    .collect();
                let mut total = D1::constant(0.0);
                for i in 0..m {
                    let a = p_dual[2 * i];
                    let c = p_dual[2 * i + 1].exp();
                    let plus = (D1::constant(xi + delta)) / c;
                    let minus = (D1::constant(xi - delta)) / c;
                    total = total + a * (plus.erf() - minus.erf());
                }
                row[j] = total.eps[0];
            }
        }

        // normal equations (J^T J + lambda diag) step = -J^T r
        let mut ata = vec![vec![0.0; np]; np];
        let mut atb = vec![0.0; np];
        for (row, &ri) in jac.iter().zip(&r) {
            #[allow(clippy::needless_range_loop)]
            for a in 0..np {
                atb[a] -= row[a] * ri;
                for b in 0..np {
                    ata[a][b] += row[a] * row[b];
                }
            }
        }
        for (a, row) in ata.iter_mut().enumerate() {
            row[a] *= 1.0 + lambda;
            row[a] += 1e-12;
        }
        let step = match solve_dense(&mut ata, &mut atb) {
            Some(s) => s,
            None => {
                lambda *= 10.0;
                continue;
            }
        };

        let trial: Vec<f64> = params.iter().zip(&step).map(|(p, s)| p + s).collect();
        let r_trial = residuals(&trial);
        let cost_trial = r_trial.iter().map(|e| e * e).sum::<f64>();
        if cost_trial <= cost {
            let rel_drop = (cost - cost_trial) / cost.max(1e-300);
            params = trial;
            r = r_trial;
            cost = cost_trial;
            lambda = (lambda * 0.3).max(1e-12);
            if rel_drop < 1e-14 || cost < 1e-28 {
                return Ok(model_of(&params));
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                // stalled: accept only if the fit is already tight
                let current = rms(&r);
                if current <= 1e-8 * vmax.max(1e-300) || cost == 0.0 {
                    return Ok(model_of(&params));
                }
                return Err(CapError::NonConvergence {
                    iterations: FIT_MAX_ITERS,
                    rms: current,
                    best: model_of(&params),
                });
            }
        }
    }
    // ran out of iterations; a small residual still counts as success
    let final_rms = rms(&r);
    if final_rms <= 1e-3 * vmax.max(1e-300) {
        Ok(model_of(&params))
    } else {
        Err(CapError::NonConvergence {
            iterations: FIT_MAX_ITERS,
            rms: final_rms,
            best: model_of(&params),
        })
    }
}

/// Residual RMS of a model against samples.
pub fn fit_rms(model: &CapacitanceModel, samples: &CapacitanceSamples) -> f64 {
    let sum: f64 = samples
        .positions
        .iter()
        .zip(&samples.values)
        .map(|(&xi, &v)| (model.eval_1d(xi) - v).powi(2))
        .sum();
    (sum / samples.len() as f64).sqrt()
}

/// Gaussian elimination with partial pivoting; destroys its inputs.
#[allow(clippy::needless_range_loop)]
fn solve_dense(a: &mut [Vec<f64>], b: &mut [f64]) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()
        })?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut s = b[col];
        for k in col + 1..n {
            s -= a[col][k] * x[k];
        }
        x[col] = s / a[col][col];
    }
    Some(x)
}

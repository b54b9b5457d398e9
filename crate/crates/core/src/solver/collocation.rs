//! Small-scale direct transcription: decision variables are the particle
//! positions at every time sample plus per-electrode potentials per step,
//! with the trapezoidal dynamics constraint enforced as a penalized
//! residual under the same primal-dual scheme as the continuous mode.
//!
//! Documented scalability bound: meant for instances up to about 20
//! particles, 5x5 electrodes and 50 time samples; beyond that the
//! continuous-map mode is the tool.

use super::{
    kde_loss_and_grad, ControlProblem, SolveError, SolveReport, SolveStatus, SolverMode,
};
use crate::diffengine::{Tape, Var, D2};
use crate::field::potential_energy_discrete;
use crate::kde::{kde_evaluate, mse};
use crate::optim::{project_box, AdamState, DualState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollocationConfig {
    pub max_iters: usize,
    pub lr: f64,
    /// Initial potentials are drawn uniformly within this fraction of
    /// v_max; exactly zero potentials are a stationary point of the energy
    /// (it is quadratic in V), so a symmetry break is needed.
    pub volt_init_frac: f64,
    pub seed: u64,
    pub stop_fraction: f64,
    pub deterministic: bool,
}

impl Default for CollocationConfig {
    fn default() -> Self {
        CollocationConfig {
            max_iters: 2000,
            lr: 5e-3,
            volt_init_frac: 0.02,
            seed: 0,
            stop_fraction: 0.0,
            deterministic: false,
        }
    }
}

/// The raw decision variables after solving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollocationVars {
    /// positions[k][i]: particle i at time sample k (index 0 is fixed).
    pub positions: Vec<Vec<[f64; 2]>>,
    /// volts[k][e]: electrode e potential at time sample k.
    pub volts: Vec<Vec<f64>>,
}

/// x_{k+1} - x_k - dt/(2 mu) (F_{k+1} + F_k); zero when the pair satisfies
/// the implicit trapezoidal update.
pub fn trapezoid_residual(
    x_k: [f64; 2],
    x_k1: [f64; 2],
    f_k: [f64; 2],
    f_k1: [f64; 2],
    dt: f64,
    mu: f64,
) -> [f64; 2] {
    let c = dt / (2.0 * mu);
    [
        x_k1[0] - x_k[0] - c * (f_k1[0] + f_k[0]),
        x_k1[1] - x_k[1] - c * (f_k1[1] + f_k[1]),
    ]
}

struct PointForce {
    f: [f64; 2],
    /// dfdx[b][a] = dF_a / dx_b
    dfdx: [[f64; 2]; 2],
    /// dfdv[e][a] = dF_a / dV_e
    dfdv: Vec<[f64; 2]>,
}

pub fn solve_collocation(
    problem: &ControlProblem,
    cfg: &CollocationConfig,
) -> Result<(SolveReport, CollocationVars), SolveError> {
    problem.validate()?;
    let n = problem.initial.len();
    let n_times = problem.times.len();
    let n_el = problem.array.len();
    let mu = problem.consts.mu;
    let started = Instant::now();

    // flat layout: positions for k = 1..n_times-1, then volts for all k
    let n_pos = (n_times - 1) * n * 2;
    let n_params = n_pos + n_times * n_el;
    let pos_idx = |k: usize, i: usize, a: usize| (k - 1) * n * 2 + i * 2 + a;
    let volt_idx = |k: usize, e: usize| n_pos + k * n_el + e;

    let mut params = vec![0.0; n_params];
    for k in 1..n_times {
        for (i, &p) in problem.initial.iter().enumerate() {
            params[pos_idx(k, i, 0)] = p[0];
            params[pos_idx(k, i, 1)] = p[1];
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let amp = cfg.volt_init_frac * problem.v_max;
    if amp > 0.0 {
        for k in 0..n_times {
            for e in 0..n_el {
                params[volt_idx(k, e)] = rng.gen_range(-amp..amp);
            }
        }
    }

    let mut adam = AdamState::new(n_params, cfg.lr);
    let mut dual = DualState::new(
        problem.dual.lambda0,
        problem.dual.alpha,
        problem.dual.residual_tol,
    );
    let mut lambda_trace = vec![dual.lambda];
    let mut loss_history = Vec::with_capacity(cfg.max_iters);
    let mut residual_history = Vec::with_capacity(cfg.max_iters);

    let initial_kde = kde_evaluate(&problem.initial, problem.bandwidth, problem.target.geom);
    let initial_mse = mse(&initial_kde, &problem.target)?;
    let mut initial_l2 = f64::NAN;
    let mut iterations = 0;

    let position_at = |params: &[f64], k: usize, i: usize| -> [f64; 2] {
        if k == 0 {
            problem.initial[i]
        } else {
            [params[pos_idx(k, i, 0)], params[pos_idx(k, i, 1)]]
        }
    };

    for iter in 0..cfg.max_iters {
        // per-point force data: one dual-valued sweep per (particle, time)
        let forces: Vec<PointForce> = (0..n * n_times)
            .into_par_iter()
            .map(|idx| {
                let i = idx / n_times;
                let k = idx % n_times;
                let x = position_at(&params, k, i);
                let tape = Tape::<D2>::with_capacity(64 * n_el);
                let vvars: Vec<Var<D2>> = (0..n_el)
                    .map(|e| tape.var(D2::constant(params[volt_idx(k, e)])))
                    .collect();
                let xv = [tape.var(D2::seeded(x[0], 0)), tape.var(D2::seeded(x[1], 1))];
                let u = potential_energy_discrete(xv, &problem.array, &vvars, &problem.cap);
                let adj = tape.sweep(u).expect("discrete force sweep");
                let fx = [adj[xv[0].index()], adj[xv[1].index()]];
                PointForce {
                    f: [fx[0].re, fx[1].re],
                    dfdx: [fx[0].eps, fx[1].eps],
                    dfdv: vvars.iter().map(|v| adj[v.index()].eps).collect(),
                }
            })
            .collect();
        let point = |i: usize, k: usize| &forces[i * n_times + k];

        let finals: Vec<[f64; 2]> =
            (0..n).map(|i| position_at(&params, n_times - 1, i)).collect();
        let (l2, g_end) = kde_loss_and_grad(&finals, problem.bandwidth, &problem.target)?;
        if iter == 0 {
            initial_l2 = l2;
        }
        let lambda = dual.lambda;

        let mut grads = vec![0.0; n_params];
        let mut res_sum = 0.0;
        for k in 0..n_times - 1 {
            let dt = problem.times[k + 1] - problem.times[k];
            let coef = dt / (2.0 * mu);
            for i in 0..n {
                let xa = position_at(&params, k, i);
                let xb = position_at(&params, k + 1, i);
                let pa = point(i, k);
                let pb = point(i, k + 1);
                let r = trapezoid_residual(xa, xb, pa.f, pb.f, dt, mu);
                res_sum += r[0] * r[0] + r[1] * r[1];
                for a in 0..2 {
                    grads[pos_idx(k + 1, i, a)] += 2.0 * lambda * r[a];
                    if k > 0 {
                        grads[pos_idx(k, i, a)] -= 2.0 * lambda * r[a];
                    }
                }
                // force chain at both ends of the interval
                for (m, pf) in [(k, pa), (k + 1, pb)] {
                    if m > 0 {
                        for b in 0..2 {
                            let dot = r[0] * pf.dfdx[b][0] + r[1] * pf.dfdx[b][1];
                            grads[pos_idx(m, i, b)] += -2.0 * lambda * coef * dot;
                        }
                    }
                    for e in 0..n_el {
                        let dot = r[0] * pf.dfdv[e][0] + r[1] * pf.dfdv[e][1];
                        grads[volt_idx(m, e)] += -2.0 * lambda * coef * dot;
                    }
                }
            }
        }
        for (i, g) in g_end.iter().enumerate() {
            grads[pos_idx(n_times - 1, i, 0)] += g[0];
            grads[pos_idx(n_times - 1, i, 1)] += g[1];
        }
        let res_mean = res_sum / (n * (n_times - 1)) as f64;

        if !l2.is_finite() || !res_mean.is_finite() {
            return Err(SolveError::NonFiniteLoss { iteration: iter, l2, residual: res_mean });
        }
        loss_history.push(l2);
        residual_history.push(res_mean);

        adam.step(&mut params, &grads).map_err(|_| SolveError::NonFiniteLoss {
            iteration: iter,
            l2,
            residual: res_mean,
        })?;

        // keep iterates feasible: positions in the domain, volts in range
        for k in 1..n_times {
            for i in 0..n {
                params[pos_idx(k, i, 0)] =
                    params[pos_idx(k, i, 0)].clamp(problem.domain.x1[0], problem.domain.x1[1]);
                params[pos_idx(k, i, 1)] =
                    params[pos_idx(k, i, 1)].clamp(problem.domain.x2[0], problem.domain.x2[1]);
            }
        }
        project_box(&mut params[n_pos..], -problem.v_max, problem.v_max);

        if (iter + 1) % problem.dual.cadence == 0 {
            dual.step(res_mean);
            lambda_trace.push(dual.lambda);
        }
        iterations = iter + 1;

        if cfg.stop_fraction > 0.0
            && l2 <= cfg.stop_fraction * initial_l2
            && res_mean <= problem.dual.residual_tol
        {
            break;
        }
    }

    let positions: Vec<Vec<[f64; 2]>> = (0..n_times)
        .map(|k| (0..n).map(|i| position_at(&params, k, i)).collect())
        .collect();
    let volts: Vec<Vec<f64>> = (0..n_times)
        .map(|k| (0..n_el).map(|e| params[volt_idx(k, e)]).collect())
        .collect();

    let final_positions = positions[n_times - 1].clone();
    let final_kde = kde_evaluate(&final_positions, problem.bandwidth, problem.target.geom);
    let final_mse = mse(&final_kde, &problem.target)?;
    let final_loss_sum = *loss_history.last().unwrap_or(&f64::NAN);
    let final_residual_mean = *residual_history.last().unwrap_or(&f64::NAN);
    let status = if final_residual_mean <= problem.dual.residual_tol {
        SolveStatus::Converged
    } else {
        SolveStatus::ResidualWarning
    };

    let report = SolveReport {
        mode: SolverMode::DiscreteCollocation,
        status,
        iterations,
        final_positions,
        final_kde,
        loss_history,
        residual_history,
        lambda_trace,
        initial_mse,
        final_mse,
        mse_reduction: 1.0 - final_mse / initial_mse,
        final_loss_sum,
        final_residual_mean,
        wall_time_s: if cfg.deterministic {
            None
        } else {
            Some(started.elapsed().as_secs_f64())
        },
    };
    Ok((report, CollocationVars { positions, volts }))
}

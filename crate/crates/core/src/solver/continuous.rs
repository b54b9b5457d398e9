//! Primal-dual training of the trajectory networks and the potential map.
//!
//! The loss is the squared density mismatch at the horizon plus
//! lambda * sum over (particle, time sample) of the squared dynamics
//! residual ||xdot - F/mu||^2. The velocity part of the residual gradient
//! needs derivatives of xdot with respect to trajectory parameters, and the
//! force part needs derivatives of F (itself a spatial gradient of the
//! quadrature energy) with respect to both positions and map parameters.
//! Both come from reverse sweeps over dual-valued tapes: the adjoint of an
//! input on a Dual-valued tape carries the plain partial in its real part
//! and the tangent derivative of that partial in its dual part.

use super::{
    kde_loss_and_grad, traj_position_g, ControlProblem, PotentialMap, SolveError, SolveReport,
    SolveStatus, SolverMode, TrajectoryNets,
};
use crate::diffengine::{Real, Tape, Var, D1, D2};
use crate::field::{potential_energy_gh, MappedPotential};
use crate::kde::{kde_evaluate, mse};
use crate::optim::{AdamState, DualState};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousConfig {
    pub max_iters: usize,
    pub lr: f64,
    /// Weight on the quadratic out-of-domain position penalty.
    pub box_weight: f64,
    /// Stop once the density loss falls below this fraction of its starting
    /// value with the residual within tolerance; 0 disables early stopping.
    pub stop_fraction: f64,
    /// Omit wall time from the report so it is byte-reproducible.
    pub deterministic: bool,
}

impl Default for ContinuousConfig {
    fn default() -> Self {
        ContinuousConfig {
            max_iters: 2000,
            lr: 2e-3,
            box_weight: 10.0,
            stop_fraction: 0.0,
            deterministic: false,
        }
    }
}

struct PairGrad {
    g_traj: Vec<f64>,
    g_pot: Vec<f64>,
    res2: f64,
    box_pen: f64,
}

/// One evaluation of the augmented loss and its full parameter gradient,
/// laid out as [particle 0 trajectory params | ... | map params].
pub struct ContinuousEval {
    pub l2: f64,
    pub res_sum: f64,
    pub res_mean: f64,
    pub box_sum: f64,
    pub grads: Vec<f64>,
}

impl ContinuousEval {
    /// The scalar the gradient differentiates: density loss plus the
    /// penalized residual sum plus the out-of-domain penalty.
    pub fn augmented(&self, lambda: f64) -> f64 {
        self.l2 + lambda * self.res_sum + self.box_sum
    }
}

/// The per-iteration computation of the primal step, exposed so the
/// assembled gradient can be checked against finite differences of
/// `augmented` from the outside.
pub fn continuous_loss_and_grad(
    problem: &ControlProblem,
    traj: &TrajectoryNets,
    map: &PotentialMap,
    lambda: f64,
    box_weight: f64,
) -> Result<ContinuousEval, SolveError> {
    let n = problem.initial.len();
    assert_eq!(traj.len(), n, "one trajectory net per particle");
    let rule = problem.gh_rule()?;
    let times = &problem.times;
    let n_times = times.len();
    let horizon = problem.horizon;
    let mu = problem.consts.mu;
    let traj_shape = traj.nets[0].shape;
    let n_traj = traj_shape.param_count();
    let n_pot = map.net.shape.param_count();
    let pot_offset = n * n_traj;

    let endpoints = traj.endpoints();
    let (l2, g_end) = kde_loss_and_grad(&endpoints, problem.bandwidth, &problem.target)?;

    let pairs: Vec<PairGrad> = (0..n * n_times)
        .into_par_iter()
        .map(|idx| {
            let i = idx / n_times;
            let k = idx % n_times;
            let t = times[k];
            let (x, xdot) = traj.position_velocity(i, t);

            // force tape: map parameters as variables, position seeded
            // in two dual directions; one sweep yields F, dF/dx and the
            // residual's vector-Jacobian product against dF/dparams
            let tape = Tape::<D2>::with_capacity(n_pot + 200 * rule.order() * rule.order());
            let pot_vars: Vec<Var<D2>> = map
                .net
                .params
                .iter()
                .map(|&p| tape.var(D2::constant(p)))
                .collect();
            let xv = [tape.var(D2::seeded(x[0], 0)), tape.var(D2::seeded(x[1], 1))];
            let tv = tape.constant(D2::constant(t));
            let mapped = MappedPotential {
                shape: map.net.shape,
                transform: map.net.transform,
                params: &pot_vars,
                norm: map.norm,
            };
            let u = potential_energy_gh(xv, tv, &mapped, &problem.consts, &rule);
            let adj = tape.sweep(u).expect("force sweep");

            let fx = [adj[xv[0].index()], adj[xv[1].index()]];
            let force = [fx[0].re, fx[1].re];
            let r = [xdot[0] - force[0] / mu, xdot[1] - force[1] / mu];
            let res2 = r[0] * r[0] + r[1] * r[1];
            let pull = -2.0 * lambda / mu;

            let g_pot: Vec<f64> = pot_vars
                .iter()
                .map(|v| {
                    let a = adj[v.index()];
                    pull * (r[0] * a.eps[0] + r[1] * a.eps[1])
                })
                .collect();

            // position cotangent: force chain, box penalty, and (at the
            // horizon) the density-loss endpoint gradient
            let mut gx = [
                pull * (r[0] * fx[0].eps[0] + r[1] * fx[1].eps[0]),
                pull * (r[0] * fx[0].eps[1] + r[1] * fx[1].eps[1]),
            ];
            let mut box_pen = 0.0;
            let bounds = [problem.domain.x1, problem.domain.x2];
            for a in 0..2 {
                let over = (x[a] - bounds[a][1]).max(0.0);
                let under = (bounds[a][0] - x[a]).max(0.0);
                box_pen += box_weight * (over * over + under * under);
                gx[a] += box_weight * 2.0 * (over - under);
            }
            if k == n_times - 1 {
                gx[0] += g_end[i][0];
                gx[1] += g_end[i][1];
            }

            // trajectory tape: time carries the dual seed, so the real
            // part of a sweep is the position pullback and the dual part
            // of a second sweep is the velocity pullback
            let ttape = Tape::<D1>::with_capacity(n_traj + 400);
            let tvars: Vec<Var<D1>> = traj.nets[i]
                .params
                .iter()
                .map(|&p| ttape.var(D1::constant(p)))
                .collect();
            let tk = ttape.constant(D1::new(t, [1.0]));
            let t0 = ttape.constant(D1::constant(0.0));
            let mut ft = Vec::with_capacity(2);
            let mut f0 = Vec::with_capacity(2);
            traj_position_g(traj_shape, &tvars, tk, horizon, &mut ft);
            traj_position_g(traj_shape, &tvars, t0, horizon, &mut f0);
            let z = [ft[0] - f0[0], ft[1] - f0[1]];
            let s_pos = z[0] * z[0].lift(gx[0]) + z[1] * z[1].lift(gx[1]);
            let s_vel = z[0] * z[0].lift(2.0 * lambda * r[0])
                + z[1] * z[1].lift(2.0 * lambda * r[1]);
            let adj_pos = ttape.sweep(s_pos).expect("position sweep");
            let adj_vel = ttape.sweep(s_vel).expect("velocity sweep");
            let g_traj: Vec<f64> = tvars
                .iter()
                .map(|v| adj_pos[v.index()].re + adj_vel[v.index()].eps[0])
                .collect();

            PairGrad { g_traj, g_pot, res2, box_pen }
        })
        .collect();

    let mut grads = vec![0.0; pot_offset + n_pot];
    let mut res_sum = 0.0;
    let mut box_sum = 0.0;
    for (idx, pg) in pairs.iter().enumerate() {
        let i = idx / n_times;
        let dst = &mut grads[i * n_traj..(i + 1) * n_traj];
        for (d, g) in dst.iter_mut().zip(&pg.g_traj) {
            *d += g;
        }
        res_sum += pg.res2;
        box_sum += pg.box_pen;
    }
    for pg in &pairs {
        let dst = &mut grads[pot_offset..];
        for (d, g) in dst.iter_mut().zip(&pg.g_pot) {
            *d += g;
        }
    }
    let res_mean = res_sum / (n * n_times) as f64;
    Ok(ContinuousEval { l2, res_sum, res_mean, box_sum, grads })
}

pub fn solve_continuous(
    problem: &ControlProblem,
    traj: &mut TrajectoryNets,
    map: &mut PotentialMap,
    cfg: &ContinuousConfig,
) -> Result<SolveReport, SolveError> {
    problem.validate()?;
    let n = problem.initial.len();
    assert_eq!(traj.len(), n, "one trajectory net per particle");
    let started = Instant::now();

    let n_traj = traj.nets[0].shape.param_count();
    let n_pot = map.net.shape.param_count();
    let pot_offset = n * n_traj;
    let n_params = pot_offset + n_pot;

    let mut params = vec![0.0; n_params];
    for (i, net) in traj.nets.iter().enumerate() {
        params[i * n_traj..(i + 1) * n_traj].copy_from_slice(&net.params);
    }
    params[pot_offset..].copy_from_slice(&map.net.params);

    let mut adam = AdamState::new(n_params, cfg.lr);
    let mut dual = DualState::new(
        problem.dual.lambda0,
        problem.dual.alpha,
        problem.dual.residual_tol,
    );
    let mut lambda_trace = vec![dual.lambda];
    let mut loss_history = Vec::with_capacity(cfg.max_iters);
    let mut residual_history = Vec::with_capacity(cfg.max_iters);

    let initial_kde = kde_evaluate(&traj.endpoints(), problem.bandwidth, problem.target.geom);
    let initial_mse = mse(&initial_kde, &problem.target)?;
    let mut initial_l2 = f64::NAN;
    let mut iterations = 0;

    for iter in 0..cfg.max_iters {
        // refresh network views from the flat vector
        for (i, net) in traj.nets.iter_mut().enumerate() {
            net.params.copy_from_slice(&params[i * n_traj..(i + 1) * n_traj]);
        }
        map.net.params.copy_from_slice(&params[pot_offset..]);

        let ContinuousEval { l2, res_mean, box_sum, grads, .. } =
            continuous_loss_and_grad(problem, traj, map, dual.lambda, cfg.box_weight)?;
        if iter == 0 {
            initial_l2 = l2;
        }

        if !l2.is_finite() || !res_mean.is_finite() || !box_sum.is_finite() {
            return Err(SolveError::NonFiniteLoss { iteration: iter, l2, residual: res_mean });
        }
        loss_history.push(l2);
        residual_history.push(res_mean);

        adam.step(&mut params, &grads).map_err(|e| match e {
            crate::optim::OptimError::NonFiniteGradient { .. } => {
                SolveError::NonFiniteLoss { iteration: iter, l2, residual: res_mean }
            }
        })?;

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

    for (i, net) in traj.nets.iter_mut().enumerate() {
        net.params.copy_from_slice(&params[i * n_traj..(i + 1) * n_traj]);
    }
    map.net.params.copy_from_slice(&params[pot_offset..]);

    let final_positions = traj.endpoints();
    let final_kde = kde_evaluate(&final_positions, problem.bandwidth, problem.target.geom);
    let final_mse = mse(&final_kde, &problem.target)?;
    let final_loss_sum = *loss_history.last().unwrap_or(&f64::NAN);
    let final_residual_mean = *residual_history.last().unwrap_or(&f64::NAN);
    let status = if final_residual_mean <= problem.dual.residual_tol {
        SolveStatus::Converged
    } else {
        SolveStatus::ResidualWarning
    };

    Ok(SolveReport {
        mode: SolverMode::ContinuousMap,
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
    })
}

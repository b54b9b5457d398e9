//! The density-shaping optimal-control solvers: a continuous-map
//! primal-dual scheme over trajectory and potential-map networks, a small
//! scale trapezoidal collocation variant over raw trajectories and
//! per-step electrode potentials, and a Heun rollout integrator for
//! validating learned controls.

mod collocation;
mod continuous;
mod rollout;

pub use collocation::{solve_collocation, trapezoid_residual, CollocationConfig, CollocationVars};
pub use continuous::{continuous_loss_and_grad, solve_continuous, ContinuousConfig, ContinuousEval};
pub use rollout::{rollout, RolloutResult};

use crate::capmodel::CapacitanceModel;
use crate::diffengine::{DiffError, Real, Tape, Var, D1, D2};
use crate::field::{
    force_gh, ElectrodeArray, FieldConstants, MapNorm, MappedPotential, PotentialField,
};
use crate::kde::{kde_l2_loss_g, Bandwidth, DensityGrid, GridGeometry, KdeError};
use crate::nnmap::{forward_slice, Mlp, MlpShape, NnError, OutputTransform};
use crate::optim::OptimError;
use crate::quadrature::{gauss_hermite, GHRule, QuadratureError};
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid problem: {0}")]
    Problem(String),
    #[error("non-finite loss at iteration {iteration} (density term {l2}, residual term {residual})")]
    NonFiniteLoss { iteration: usize, l2: f64, residual: f64 },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Kde(#[from] KdeError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Network(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub x1: [f64; 2],
    pub x2: [f64; 2],
}

impl DomainBox {
    pub fn square(min: f64, max: f64) -> Self {
        DomainBox { x1: [min, max], x2: [min, max] }
    }

    pub fn contains(&self, p: [f64; 2], tol: f64) -> bool {
        p[0] >= self.x1[0] - tol
            && p[0] <= self.x1[1] + tol
            && p[1] >= self.x2[0] - tol
            && p[1] <= self.x2[1] + tol
    }

    pub fn clamp(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0].clamp(self.x1[0], self.x1[1]), p[1].clamp(self.x2[0], self.x2[1])]
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.x1[0] + self.x1[1]), 0.5 * (self.x2[0] + self.x2[1])]
    }

    pub fn widths(&self) -> [f64; 2] {
        [self.x1[1] - self.x1[0], self.x2[1] - self.x2[0]]
    }

    /// Box grown about its center, used as the rollout safety region.
    pub fn expanded(&self, factor: f64) -> Self {
        let c = self.center();
        let w = self.widths();
        DomainBox {
            x1: [c[0] - 0.5 * factor * w[0], c[0] + 0.5 * factor * w[0]],
            x2: [c[1] - 0.5 * factor * w[1], c[1] + 0.5 * factor * w[1]],
        }
    }

    pub fn map_norm(&self, t_max: f64) -> MapNorm {
        MapNorm {
            x1_min: self.x1[0],
            x1_max: self.x1[1],
            x2_min: self.x2[0],
            x2_max: self.x2[1],
            t_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualConfig {
    pub lambda0: f64,
    pub alpha: f64,
    /// Primal iterations between multiplier updates.
    pub cadence: usize,
    /// Tolerance on the mean squared dynamics residual per point.
    pub residual_tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverMode {
    ContinuousMap,
    DiscreteCollocation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlProblem {
    pub domain: DomainBox,
    pub horizon: f64,
    pub times: Vec<f64>,
    pub array: ElectrodeArray,
    pub cap: CapacitanceModel,
    pub consts: FieldConstants,
    pub initial: Vec<[f64; 2]>,
    pub target: DensityGrid,
    pub bandwidth: Bandwidth,
    pub v_max: f64,
    pub dual: DualConfig,
    pub mode: SolverMode,
}

impl ControlProblem {
    pub fn validate(&self) -> Result<(), SolveError> {
        if self.times.len() < 2 {
            return Err(SolveError::Problem("need at least two time samples".into()));
        }
        if self.times[0].abs() > 1e-12 {
            return Err(SolveError::Problem("time samples must start at 0".into()));
        }
        for w in self.times.windows(2) {
            if w[1] <= w[0] {
                return Err(SolveError::Problem(format!(
                    "time samples must be strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        let last = *self.times.last().unwrap();
        if (last - self.horizon).abs() > 1e-9 * self.horizon.max(1.0) {
            return Err(SolveError::Problem(format!(
                "last time sample {last} does not reach the horizon {}",
                self.horizon
            )));
        }
        if self.initial.is_empty() {
            return Err(SolveError::Problem("no initial positions".into()));
        }
        for (i, &p) in self.initial.iter().enumerate() {
            if !self.domain.contains(p, 1e-12) {
                return Err(SolveError::Problem(format!(
                    "initial position {i} at ({}, {}) lies outside the domain",
                    p[0], p[1]
                )));
            }
        }
        let mass = self.target.integrated_mass();
        if !(0.9..=1.1).contains(&mass) {
            return Err(SolveError::Problem(format!(
                "target density integrates to {mass}, expected about 1"
            )));
        }
        Ok(())
    }

    pub fn gh_rule(&self) -> Result<GHRule, SolveError> {
        Ok(gauss_hermite(self.consts.gh_order)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    ResidualWarning,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub mode: SolverMode,
    pub status: SolveStatus,
    pub iterations: usize,
    pub final_positions: Vec<[f64; 2]>,
    pub final_kde: DensityGrid,
    /// Raw-sum density loss per iteration.
    pub loss_history: Vec<f64>,
    /// Mean squared dynamics residual per collocation point, per iteration.
    pub residual_history: Vec<f64>,
    /// Multiplier after every dual update (leading entry is the start value).
    pub lambda_trace: Vec<f64>,
    pub initial_mse: f64,
    pub final_mse: f64,
    /// 1 - final/initial, the headline reduction fraction.
    pub mse_reduction: f64,
    pub final_loss_sum: f64,
    pub final_residual_mean: f64,
    /// Omitted in deterministic mode so reports are byte-reproducible.
    pub wall_time_s: Option<f64>,
}

/// Per-particle trajectory networks f(t), with positions anchored to the
/// true starts: x(t) = f(t) - f(0) + x0, so x(0) = x0 holds exactly no
/// matter the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryNets {
    pub nets: Vec<Mlp>,
    pub horizon: f64,
    pub anchors: Vec<[f64; 2]>,
}

/// Trajectory nets take normalized time 2t/T - 1 and output a raw position
/// pair; evaluation is generic so the same path records on tapes.
pub fn traj_position_g<S: Real>(
    shape: MlpShape,
    params: &[S],
    t: S,
    horizon: f64,
    out: &mut Vec<S>,
) {
    let u = t * t.lift(2.0 / horizon) - t.lift(1.0);
    forward_slice(shape, OutputTransform::Identity, params, &[u], out);
}

impl TrajectoryNets {
    pub fn init(x0: &[[f64; 2]], horizon: f64, hidden: usize, seed: u64) -> Self {
        assert!(horizon > 0.0 && !x0.is_empty());
        let shape = MlpShape::new(1, hidden, 2).expect("valid trajectory shape");
        let nets = x0
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let mut net = Mlp::init(shape, OutputTransform::Identity, seed ^ (i as u64).wrapping_mul(0x9E3779B97F4A7C15), 0.01);
                // start from f(0) = x0 so the anchor shift is zero
                net.calibrate_outputs(&[-1.0], &[p[0], p[1]]).expect("calibration");
                net
            })
            .collect();
        TrajectoryNets { nets, horizon, anchors: x0.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.nets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nets.is_empty()
    }

    pub fn position(&self, i: usize, t: f64) -> [f64; 2] {
        let net = &self.nets[i];
        let mut ft = Vec::with_capacity(2);
        let mut f0 = Vec::with_capacity(2);
        traj_position_g(net.shape, &net.params, t, self.horizon, &mut ft);
        traj_position_g(net.shape, &net.params, 0.0, self.horizon, &mut f0);
        [
            ft[0] - f0[0] + self.anchors[i][0],
            ft[1] - f0[1] + self.anchors[i][1],
        ]
    }

    /// Anchored position and its time derivative in one dual forward pass.
    pub fn position_velocity(&self, i: usize, t: f64) -> ([f64; 2], [f64; 2]) {
        let net = &self.nets[i];
        let params: Vec<D1> = net.params.iter().map(|&p| D1::constant(p)).collect();
        let mut ft = Vec::with_capacity(2);
        let mut f0 = Vec::with_capacity(2);
        traj_position_g(net.shape, &params, D1::new(t, [1.0]), self.horizon, &mut ft);
        traj_position_g(net.shape, &params, D1::constant(0.0), self.horizon, &mut f0);
        (
            [
                ft[0].re - f0[0].re + self.anchors[i][0],
                ft[1].re - f0[1].re + self.anchors[i][1],
            ],
            [ft[0].eps[0], ft[1].eps[0]],
        )
    }

    pub fn endpoints(&self) -> Vec<[f64; 2]> {
        (0..self.len()).map(|i| self.position(i, self.horizon)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trajectory nets serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// The learned control: a network over (x1, x2, t) whose values at
/// electrode centers are the applied potentials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialMap {
    pub net: Mlp,
    pub norm: MapNorm,
}

impl PotentialMap {
    pub fn init(domain: &DomainBox, horizon: f64, v_max: f64, hidden: usize, seed: u64) -> Self {
        let shape = MlpShape::new(3, hidden, 1).expect("valid potential map shape");
        let transform = OutputTransform::ScaleClip { scale: v_max, bound: v_max };
        // near-zero output at start: no actuation is the trivial fixed point
        let net = Mlp::init(shape, transform, seed, 0.01);
        PotentialMap { net, norm: domain.map_norm(horizon) }
    }

    pub fn value(&self, x: [f64; 2], t: f64) -> f64 {
        let map = MappedPotential {
            shape: self.net.shape,
            transform: self.net.transform,
            params: &self.net.params,
            norm: self.norm,
        };
        map.potential(x, t)
    }

    pub fn force(&self, x: [f64; 2], t: f64, consts: &FieldConstants, rule: &GHRule) -> [f64; 2] {
        let params: Vec<D2> = self.net.params.iter().map(|&p| D2::constant(p)).collect();
        let map = MappedPotential {
            shape: self.net.shape,
            transform: self.net.transform,
            params: &params,
            norm: self.norm,
        };
        force_gh(x, t, &map, consts, rule)
    }

    /// Closure with the parameter lift hoisted out, for rollouts.
    pub fn force_fn<'a>(
        &'a self,
        consts: &'a FieldConstants,
        rule: &'a GHRule,
    ) -> impl Fn([f64; 2], f64) -> [f64; 2] + Sync + 'a {
        let params: Vec<D2> = self.net.params.iter().map(|&p| D2::constant(p)).collect();
        move |x, t| {
            let map = MappedPotential {
                shape: self.net.shape,
                transform: self.net.transform,
                params: &params,
                norm: self.norm,
            };
            force_gh(x, t, &map, consts, rule)
        }
    }

    /// Map values at cell centers at a fixed time, for snapshots.
    pub fn grid_snapshot(&self, geom: GridGeometry, t: f64) -> DensityGrid {
        let mut grid = DensityGrid::zeros(geom);
        let centers: Vec<[f64; 2]> = geom.centers().collect();
        for (cell, c) in grid.values.iter_mut().zip(centers) {
            *cell = self.value(c, t);
        }
        grid
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("potential map serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Density loss at the endpoints and its gradient with respect to each
/// endpoint coordinate, from one reverse sweep.
pub fn kde_loss_and_grad(
    endpoints: &[[f64; 2]],
    bw: Bandwidth,
    target: &DensityGrid,
) -> Result<(f64, Vec<[f64; 2]>), DiffError> {
    let tape = Tape::<f64>::with_capacity(endpoints.len() * target.geom.cell_count() * 8);
    let vars: Vec<[Var<f64>; 2]> = endpoints
        .iter()
        .map(|&p| [tape.var(p[0]), tape.var(p[1])])
        .collect();
    let loss = kde_l2_loss_g(&vars, bw, target.geom, &target.values);
    let adj = tape.sweep(loss)?;
    let grads = vars
        .iter()
        .map(|v| [adj[v[0].index()], adj[v[1].index()]])
        .collect();
    Ok((loss.value(), grads))
}

/// One row per (time, particle): `t,particle_id,x1,x2`.
pub fn write_trajectory_csv<W: Write>(
    times: &[f64],
    positions: &[Vec<[f64; 2]>],
    mut w: W,
) -> std::io::Result<()> {
    assert_eq!(times.len(), positions.len());
    writeln!(w, "t,particle_id,x1,x2")?;
    for (t, row) in times.iter().zip(positions) {
        for (i, p) in row.iter().enumerate() {
            writeln!(w, "{t},{i},{},{}", p[0], p[1])?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kde::gaussian_target;
    use approx::assert_relative_eq;

    fn toy_problem() -> ControlProblem {
        let geom = GridGeometry::square(-1.0, 1.0, 16);
        ControlProblem {
            domain: DomainBox::square(-1.0, 1.0),
            horizon: 1.0,
            times: (0..=10).map(|k| k as f64 * 0.1).collect(),
            array: ElectrodeArray::grid(3, 3, -1.0, -1.0, 2.0 / 3.0, 400.0),
            cap: CapacitanceModel::single(1.0, 0.3, 0.2),
            consts: FieldConstants::new(1.0, 0.2, 1.0, 3),
            initial: vec![[0.0, 0.0], [0.5, -0.5]],
            target: gaussian_target([0.0, 0.0], 0.2, geom),
            bandwidth: Bandwidth::isotropic(0.15),
            v_max: 400.0,
            dual: DualConfig { lambda0: 0.0, alpha: 0.1, cadence: 10, residual_tol: 1e-4 },
            mode: SolverMode::ContinuousMap,
        }
    }

    #[test]
    fn valid_problem_passes() {
        toy_problem().validate().unwrap();
    }

    #[test]
    fn non_increasing_times_rejected() {
        let mut p = toy_problem();
        p.times[5] = p.times[4];
        assert!(matches!(p.validate(), Err(SolveError::Problem(_))));
    }

    #[test]
    fn outside_initial_rejected() {
        let mut p = toy_problem();
        p.initial[0] = [2.0, 0.0];
        assert!(p.validate().is_err());
    }

    #[test]
    fn domain_box_ops() {
        let b = DomainBox::square(-2.0, 2.0);
        assert!(b.contains([1.9, -1.9], 0.0));
        assert!(!b.contains([2.1, 0.0], 0.0));
        assert_eq!(b.clamp([3.0, -5.0]), [2.0, -2.0]);
        let e = b.expanded(1.5);
        assert_relative_eq!(e.x1[0], -3.0);
        assert_relative_eq!(e.x1[1], 3.0);
    }

    #[test]
    fn trajectory_nets_anchor_initial_positions() {
        let x0 = [[0.3, -0.7], [-0.2, 0.9]];
        let nets = TrajectoryNets::init(&x0, 2.0, 8, 11);
        for (i, &p) in x0.iter().enumerate() {
            let got = nets.position(i, 0.0);
            assert_relative_eq!(got[0], p[0], epsilon = 1e-12);
            assert_relative_eq!(got[1], p[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn position_velocity_matches_finite_differences() {
        let nets = TrajectoryNets::init(&[[0.1, 0.2]], 1.5, 8, 3);
        let t = 0.8;
        let (x, v) = nets.position_velocity(0, t);
        let h = 1e-6;
        let xp = nets.position(0, t + h);
        let xm = nets.position(0, t - h);
        for a in 0..2 {
            assert_relative_eq!(x[a], nets.position(0, t)[a], epsilon = 1e-14);
            assert_relative_eq!(v[a], (xp[a] - xm[a]) / (2.0 * h), max_relative = 1e-5, epsilon = 1e-10);
        }
    }

    #[test]
    fn potential_map_starts_near_zero_and_respects_bound() {
        let domain = DomainBox::square(-1.0, 1.0);
        let map = PotentialMap::init(&domain, 1.0, 400.0, 8, 5);
        let v = map.value([0.3, -0.3], 0.5);
        assert!(v.abs() < 40.0, "initial potentials near zero, got {v}");
        assert!(v.abs() <= 400.0);
    }

    #[test]
    fn kde_grad_matches_finite_differences() {
        let geom = GridGeometry::square(-1.0, 1.0, 12);
        let target = gaussian_target([0.2, -0.1], 0.3, geom);
        let bw = Bandwidth::isotropic(0.2);
        let pts = vec![[0.1, 0.4], [-0.3, -0.2], [0.5, 0.0]];
        let (loss, grads) = kde_loss_and_grad(&pts, bw, &target).unwrap();
        assert!(loss > 0.0);
        let h = 1e-6;
        for i in 0..pts.len() {
            for a in 0..2 {
                let mut pp = pts.clone();
                let mut pm = pts.clone();
                pp[i][a] += h;
                pm[i][a] -= h;
                let lp = kde_l2_loss_g(&pp, bw, geom, &target.values);
                let lm = kde_l2_loss_g(&pm, bw, geom, &target.values);
                let fd = (lp - lm) / (2.0 * h);
                assert_relative_eq!(grads[i][a], fd, max_relative = 1e-5, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn trajectory_csv_layout() {
        let times = [0.0, 0.5];
        let pos = vec![vec![[1.0, 2.0]], vec![[3.0, 4.0]]];
        let mut buf = Vec::new();
        write_trajectory_csv(&times, &pos, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "t,particle_id,x1,x2\n0,0,1,2\n0.5,0,3,4\n");
    }

    #[test]
    fn checkpoints_round_trip() {
        let nets = TrajectoryNets::init(&[[0.0, 0.0]], 1.0, 4, 9);
        let back = TrajectoryNets::from_json(&nets.to_json()).unwrap();
        assert_eq!(back, nets);
        let map = PotentialMap::init(&DomainBox::square(-1.0, 1.0), 1.0, 400.0, 4, 9);
        let back = PotentialMap::from_json(&map.to_json()).unwrap();
        assert_eq!(back, map);
    }
}

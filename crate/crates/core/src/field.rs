//! Electrode array geometry, particle electric potential, potential energy
//! in its discrete-sum and Gauss-Hermite forms, and the force field
//! F = grad U that drives particle motion.

use crate::capmodel::CapacitanceModel;
use crate::diffengine::{Real, D2};
use crate::nnmap::{forward_slice, MlpShape, OutputTransform};
use crate::quadrature::GHRule;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeArray {
    pub positions: Vec<[f64; 2]>,
    pub pitch: f64,
    pub v_max: f64,
}

impl ElectrodeArray {
    /// nx-by-ny grid of electrode centers filling the given box.
    pub fn grid(nx: usize, ny: usize, x1_min: f64, x2_min: f64, pitch: f64, v_max: f64) -> Self {
        assert!(pitch > 0.0 && v_max > 0.0);
        let mut positions = Vec::with_capacity(nx * ny);
        for i in 0..nx {
            for j in 0..ny {
                positions.push([
                    x1_min + (i as f64 + 0.5) * pitch,
                    x2_min + (j as f64 + 0.5) * pitch,
                ]);
            }
        }
        ElectrodeArray { positions, pitch, v_max }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldConstants {
    /// Fluid viscous coefficient; velocity = force / mu.
    pub mu: f64,
    /// Gaussian width of the capacitance reading (c / sqrt(2)).
    pub sigma: f64,
    /// Multiplier on the quadrature energy (the capacitance scale `a`).
    pub energy_scale: f64,
    pub gh_order: usize,
}

impl FieldConstants {
    pub fn new(mu: f64, sigma: f64, energy_scale: f64, gh_order: usize) -> Self {
        assert!(mu > 0.0 && sigma > 0.0 && gh_order >= 2);
        FieldConstants { mu, sigma, energy_scale, gh_order }
    }
}

/// Continuous potential map evaluated over any scalar algebra. Implemented
/// by the network-backed map and by plain closures in tests.
pub trait PotentialField<S: Real> {
    fn potential(&self, x: [S; 2], t: S) -> S;
}

/// Closure adapter for tests and analytic fields.
pub struct FnPotential<F>(pub F);

impl<S: Real, F: Fn([S; 2], S) -> S> PotentialField<S> for FnPotential<F> {
    fn potential(&self, x: [S; 2], t: S) -> S {
        (self.0)(x, t)
    }
}

/// Input normalization box for the network-backed map: position and time are
/// mapped to [-1, 1] before the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapNorm {
    pub x1_min: f64,
    pub x1_max: f64,
    pub x2_min: f64,
    pub x2_max: f64,
    pub t_max: f64,
}

impl MapNorm {
    fn scale<S: Real>(v: S, lo: f64, hi: f64) -> S {
        let c = 2.0 / (hi - lo);
        v * v.lift(c) - v.lift(lo * c + 1.0)
    }
}

/// Network-backed potential map over borrowed parameters, so the same
/// definition serves plain evaluation (f64 or dual params) and tape
/// recording (variable params).
pub struct MappedPotential<'a, S> {
    pub shape: MlpShape,
    pub transform: OutputTransform,
    pub params: &'a [S],
    pub norm: MapNorm,
}

impl<'a, S: Real> PotentialField<S> for MappedPotential<'a, S> {
    fn potential(&self, x: [S; 2], t: S) -> S {
        let input = [
            MapNorm::scale(x[0], self.norm.x1_min, self.norm.x1_max),
            MapNorm::scale(x[1], self.norm.x2_min, self.norm.x2_max),
            MapNorm::scale(t, 0.0, self.norm.t_max),
        ];
        let mut out = Vec::with_capacity(1);
        forward_slice(self.shape, self.transform, self.params, &input, &mut out);
        out[0]
    }
}

/// Capacitance-weighted mean of the electrode potentials (the steady-state
/// particle potential): v = sum C_ij V_ij / sum C_ij.
pub fn particle_potential_discrete<S: Real>(
    x: [S; 2],
    array: &ElectrodeArray,
    volts: &[S],
    cap: &CapacitanceModel,
) -> S {
    debug_assert_eq!(volts.len(), array.len());
    let mut num = x[0].lift(0.0);
    let mut den = x[0].lift(0.0);
    for (y, v) in array.positions.iter().zip(volts) {
        let c = cap.eval_2d_g(x, *y);
        num = num + c * *v;
        den = den + c;
    }
    num / den
}

/// U = 1/2 sum C_ij (V_ij - v)^2; zero iff all potentials are equal.
pub fn potential_energy_discrete<S: Real>(
    x: [S; 2],
    array: &ElectrodeArray,
    volts: &[S],
    cap: &CapacitanceModel,
) -> S {
    debug_assert_eq!(volts.len(), array.len());
    let v_bar = particle_potential_discrete(x, array, volts, cap);
    let mut energy = x[0].lift(0.0);
    for (y, v) in array.positions.iter().zip(volts) {
        let c = cap.eval_2d_g(x, *y);
        let d = *v - v_bar;
        energy = energy + c * d * d;
    }
    energy * x[0].lift(0.5)
}

/// Tensor-product Gauss-Hermite estimate of E[V(Y) | X = x] under
/// N(x, sigma^2 I): (1/pi) sum_ij w_i w_j V(sqrt(2) sigma y_i + x1, ...).
pub fn mean_potential_gh<S: Real>(
    x: [S; 2],
    t: S,
    vmap: &impl PotentialField<S>,
    consts: &FieldConstants,
    rule: &GHRule,
) -> S {
    let s = 2f64.sqrt() * consts.sigma;
    let inv_pi = x[0].lift(1.0 / std::f64::consts::PI);
    let mut acc = x[0].lift(0.0);
    for (&yi, &wi) in rule.nodes().iter().zip(rule.weights()) {
        for (&yj, &wj) in rule.nodes().iter().zip(rule.weights()) {
            let p = [x[0] + x[0].lift(s * yi), x[1] + x[1].lift(s * yj)];
            acc = acc + x[0].lift(wi * wj) * vmap.potential(p, t);
        }
    }
    acc * inv_pi
}

/// energy_scale times the quadrature estimate of Var[V(Y) | X = x].
pub fn potential_energy_gh<S: Real>(
    x: [S; 2],
    t: S,
    vmap: &impl PotentialField<S>,
    consts: &FieldConstants,
    rule: &GHRule,
) -> S {
    let s = 2f64.sqrt() * consts.sigma;
    let n = rule.order();
    let mut values = Vec::with_capacity(n * n);
    let mut mean = x[0].lift(0.0);
    let inv_pi = x[0].lift(1.0 / std::f64::consts::PI);
    for (&yi, &wi) in rule.nodes().iter().zip(rule.weights()) {
        for (&yj, &wj) in rule.nodes().iter().zip(rule.weights()) {
            let p = [x[0] + x[0].lift(s * yi), x[1] + x[1].lift(s * yj)];
            let v = vmap.potential(p, t);
            mean = mean + x[0].lift(wi * wj) * v;
            values.push((wi * wj, v));
        }
    }
    mean = mean * inv_pi;
    let mut var = x[0].lift(0.0);
    for (w, v) in values {
        let d = v - mean;
        var = var + x[0].lift(w) * d * d;
    }
    var * inv_pi * x[0].lift(consts.energy_scale)
}

/// F = grad_x U for the quadrature energy, both components in one
/// two-direction forward pass.
pub fn force_gh(
    x: [f64; 2],
    t: f64,
    vmap: &impl PotentialField<D2>,
    consts: &FieldConstants,
    rule: &GHRule,
) -> [f64; 2] {
    let xs = [D2::seeded(x[0], 0), D2::seeded(x[1], 1)];
    let u = potential_energy_gh(xs, D2::constant(t), vmap, consts, rule);
    [u.eps[0], u.eps[1]]
}

/// F = grad_x U for the discrete-sum energy.
pub fn force_discrete(
    x: [f64; 2],
    array: &ElectrodeArray,
    volts: &[f64],
    cap: &CapacitanceModel,
) -> [f64; 2] {
    let xs = [D2::seeded(x[0], 0), D2::seeded(x[1], 1)];
    let vs: Vec<D2> = volts.iter().map(|&v| D2::constant(v)).collect();
    let u = potential_energy_discrete(xs, array, &vs, cap);
    [u.eps[0], u.eps[1]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::gauss_hermite;
    use approx::assert_relative_eq;

    fn small_model() -> CapacitanceModel {
        CapacitanceModel::single(1.0, 0.5, 0.3)
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (*seed >> 11) as f64 / (1u64 << 53) as f64
    }

    #[test]
    fn constant_potentials_give_constant_particle_potential() {
        let array = ElectrodeArray::grid(3, 3, 0.0, 0.0, 1.0, 400.0);
        let volts = vec![300.0; array.len()];
        let cap = small_model();
        let v = particle_potential_discrete([1.2, 0.7], &array, &volts, &cap);
        assert_relative_eq!(v, 300.0, max_relative = 1e-12);
    }

    #[test]
    fn two_electrode_midpoint_is_the_mean() {
        let array = ElectrodeArray {
            positions: vec![[-1.0, 0.0], [1.0, 0.0]],
            pitch: 2.0,
            v_max: 400.0,
        };
        let cap = small_model();
        let v = particle_potential_discrete([0.0, 0.0], &array, &[0.0, 100.0], &cap);
        assert_relative_eq!(v, 50.0, max_relative = 1e-12);
    }

    #[test]
    fn particle_potential_matches_brute_force() {
        let array = ElectrodeArray::grid(3, 3, 0.0, 0.0, 1.0, 400.0);
        let cap = small_model();
        let mut seed = 7u64;
        for _ in 0..10 {
            let volts: Vec<f64> = (0..9).map(|_| lcg(&mut seed) * 200.0 - 100.0).collect();
            let x = [lcg(&mut seed) * 3.0, lcg(&mut seed) * 3.0];
            let mut num = 0.0;
            let mut den = 0.0;
            for (y, v) in array.positions.iter().zip(&volts) {
                let d = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt();
                let c = cap.eval_1d(d);
                num += c * v;
                den += c;
            }
            let expected = num / den;
            let got = particle_potential_discrete(x, &array, &volts, &cap);
            assert_relative_eq!(got, expected, max_relative = 1e-12);
            let lo = volts.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = volts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(got >= lo - 1e-9 && got <= hi + 1e-9, "convex combination");
        }
    }

    #[test]
    fn uniform_potentials_have_zero_energy_and_force() {
        let array = ElectrodeArray::grid(3, 3, 0.0, 0.0, 1.0, 400.0);
        let cap = small_model();
        let volts = vec![123.0; 9];
        let u = potential_energy_discrete([0.9, 1.4], &array, &volts, &cap);
        assert!(u.abs() < 1e-20);
        let f = force_discrete([0.9, 1.4], &array, &volts, &cap);
        assert!(f[0].abs() < 1e-12 && f[1].abs() < 1e-12);
    }

    #[test]
    fn two_electrode_opposite_sign_energy() {
        // equidistant from both: v = 0, U = C0 V0^2
        let array = ElectrodeArray {
            positions: vec![[-1.0, 0.0], [1.0, 0.0]],
            pitch: 2.0,
            v_max: 400.0,
        };
        let cap = small_model();
        let v0 = 40.0;
        let c0 = cap.eval_1d(1.0);
        let u = potential_energy_discrete([0.0, 0.0], &array, &[-v0, v0], &cap);
        assert_relative_eq!(u, c0 * v0 * v0, max_relative = 1e-12);
    }

    #[test]
    fn discrete_energy_matches_brute_force() {
        let array = ElectrodeArray::grid(4, 4, 0.0, 0.0, 0.8, 400.0);
        let cap = small_model();
        let mut seed = 99u64;
        let volts: Vec<f64> = (0..16).map(|_| lcg(&mut seed) * 100.0 - 50.0).collect();
        let x = [1.3, 2.1];
        let caps: Vec<f64> = array
            .positions
            .iter()
            .map(|y| cap.eval_1d(((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt()))
            .collect();
        let csum: f64 = caps.iter().sum();
        let vbar: f64 = caps.iter().zip(&volts).map(|(c, v)| c * v).sum::<f64>() / csum;
        let expected: f64 =
            0.5 * caps.iter().zip(&volts).map(|(c, v)| c * (v - vbar).powi(2)).sum::<f64>();
        let got = potential_energy_discrete(x, &array, &volts, &cap);
        assert_relative_eq!(got, expected, max_relative = 1e-12);
        assert!(got >= 0.0);
    }

    #[test]
    fn shifting_all_potentials_leaves_energy_unchanged() {
        let array = ElectrodeArray::grid(3, 3, 0.0, 0.0, 1.0, 400.0);
        let cap = small_model();
        let mut seed = 5u64;
        let volts: Vec<f64> = (0..9).map(|_| lcg(&mut seed) * 60.0).collect();
        let shifted: Vec<f64> = volts.iter().map(|v| v + 37.5).collect();
        let x = [1.1, 0.6];
        let a = potential_energy_discrete(x, &array, &volts, &cap);
        let b = potential_energy_discrete(x, &array, &shifted, &cap);
        assert_relative_eq!(a, b, max_relative = 1e-10);
    }

    #[test]
    fn gh_mean_exactness() {
        let consts = FieldConstants::new(1.0, 0.3, 1.0, 4);
        let rule = gauss_hermite(4).unwrap();
        // constant map
        let v0 = 17.5;
        let vmap = FnPotential(|_x: [f64; 2], _t| v0);
        let m = mean_potential_gh([0.4, -0.2], 0.0, &vmap, &consts, &rule);
        assert_relative_eq!(m, v0, max_relative = 1e-13);
        // linear map: E[Y1] = x1
        let vmap = FnPotential(|x: [f64; 2], _t| x[0]);
        let m = mean_potential_gh([0.4, -0.2], 0.0, &vmap, &consts, &rule);
        assert_relative_eq!(m, 0.4, max_relative = 1e-12);
        // quadratic map: E[Y1^2] = x1^2 + sigma^2
        let vmap = FnPotential(|x: [f64; 2], _t| x[0] * x[0]);
        let m = mean_potential_gh([0.4, -0.2], 0.0, &vmap, &consts, &rule);
        assert_relative_eq!(m, 0.4f64.powi(2) + 0.3f64.powi(2), max_relative = 1e-12);
    }

    #[test]
    fn gh_energy_is_conditional_variance() {
        let consts = FieldConstants::new(1.0, 0.25, 1.0, 5);
        let rule = gauss_hermite(5).unwrap();
        let x = [0.7, -0.1];
        // constant -> 0
        let vmap = FnPotential(|_x: [f64; 2], _t| 3.0);
        let u = potential_energy_gh(x, 0.0, &vmap, &consts, &rule);
        assert!(u.abs() < 1e-12);
        // V(y) = y1 -> Var = sigma^2
        let vmap = FnPotential(|x: [f64; 2], _t| x[0]);
        let u = potential_energy_gh(x, 0.0, &vmap, &consts, &rule);
        assert_relative_eq!(u, 0.25f64.powi(2), max_relative = 1e-11);
        // V(y) = y1 + y2 -> 2 sigma^2 (independent components add)
        let vmap = FnPotential(|x: [f64; 2], _t| x[0] + x[1]);
        let u = potential_energy_gh(x, 0.0, &vmap, &consts, &rule);
        assert_relative_eq!(u, 2.0 * 0.25f64.powi(2), max_relative = 1e-11);
        // energy_scale multiplies
        let scaled = FieldConstants::new(1.0, 0.25, 2.5, 5);
        let u2 = potential_energy_gh(x, 0.0, &vmap, &scaled, &rule);
        assert_relative_eq!(u2, 2.5 * u, max_relative = 1e-12);
    }

    #[test]
    fn force_matches_finite_differences() {
        let consts = FieldConstants::new(1.0, 0.3, 1.0, 6);
        let rule = gauss_hermite(6).unwrap();
        let mut seed = 31u64;
        for _ in 0..5 {
            let x = [lcg(&mut seed) * 2.0 - 1.0, lcg(&mut seed) * 2.0 - 1.0];
            let energy = |p: [f64; 2]| {
                let vmap =
                    FnPotential(|y: [f64; 2], _t: f64| (y[0] * 1.3).tanh() + 0.5 * y[1] * y[1]);
                potential_energy_gh(p, 0.0, &vmap, &consts, &rule)
            };
            let vmap_d =
                FnPotential(|y: [D2; 2], _t: D2| (y[0] * y[0].lift(1.3)).tanh()
                    + y[0].lift(0.5) * y[1] * y[1]);
            let f = force_gh(x, 0.0, &vmap_d, &consts, &rule);
            let h = 1e-6;
            for axis in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[axis] += h;
                xm[axis] -= h;
                let fd = (energy(xp) - energy(xm)) / (2.0 * h);
                assert_relative_eq!(f[axis], fd, max_relative = 1e-5, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn force_vanishes_at_symmetry_midpoint() {
        let array = ElectrodeArray {
            positions: vec![[-1.0, 0.0], [1.0, 0.0]],
            pitch: 2.0,
            v_max: 400.0,
        };
        let cap = small_model();
        let f = force_discrete([0.0, 0.37], &array, &[-80.0, 80.0], &cap);
        assert!(f[0].abs() < 1e-12, "axial force at the midpoint: {}", f[0]);
    }

    #[test]
    fn force_discrete_matches_finite_differences() {
        let array = ElectrodeArray::grid(3, 3, -1.5, -1.5, 1.0, 400.0);
        let cap = small_model();
        let mut seed = 13u64;
        let volts: Vec<f64> = (0..9).map(|_| lcg(&mut seed) * 80.0 - 40.0).collect();
        let x = [0.21, -0.43];
        let f = force_discrete(x, &array, &volts, &cap);
        let h = 1e-6;
        for axis in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[axis] += h;
            xm[axis] -= h;
            let fd = (potential_energy_discrete(xp, &array, &volts, &cap)
                - potential_energy_discrete(xm, &array, &volts, &cap))
                / (2.0 * h);
            assert_relative_eq!(f[axis], fd, max_relative = 1e-5, epsilon = 1e-10);
        }
    }

    #[test]
    fn dense_array_discrete_mean_approaches_gh_mean() {
        // smooth map sampled on a dense electrode grid: the capacitance
        // weights approximate the conditional Gaussian, so the discrete
        // particle potential should approach the quadrature expectation
        let sigma = 0.3f64;
        let c = sigma * 2f64.sqrt();
        let pitch = 0.1;
        let cap = CapacitanceModel::single(1.0, c, pitch / 2.0);
        let array = ElectrodeArray::grid(60, 60, -3.0, -3.0, pitch, 400.0);
        let smooth = |y: [f64; 2]| 10.0 + 3.0 * (0.7 * y[0]).sin() + 2.0 * (0.5 * y[1]).cos();
        let volts: Vec<f64> = array.positions.iter().map(|&y| smooth(y)).collect();
        let consts = FieldConstants::new(1.0, sigma, 1.0, 12);
        let rule = gauss_hermite(12).unwrap();
        let vmap = FnPotential(move |y: [f64; 2], _t| smooth(y));
        for &x in &[[0.0, 0.0], [0.5, -0.4], [-0.8, 0.9]] {
            let discrete = particle_potential_discrete(x, &array, &volts, &cap);
            let gh = mean_potential_gh(x, 0.0, &vmap, &consts, &rule);
            let rel = (discrete - gh).abs() / gh.abs();
            assert!(rel < 0.02, "x={x:?} discrete={discrete} gh={gh} rel={rel}");
        }
    }
}

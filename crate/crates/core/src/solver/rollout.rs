//! Forward integration of the particle dynamics mu * xdot = F(x, t) with
//! explicit trapezoidal (Heun) steps, used to validate learned controls
//! independently of the trajectory networks.

use super::DomainBox;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub times: Vec<f64>,
    /// positions[k][i]: particle i at times[k].
    pub positions: Vec<Vec<[f64; 2]>>,
    /// Set when a particle left the enlarged safety box and was clamped.
    pub clamped: Vec<bool>,
}

impl RolloutResult {
    pub fn endpoints(&self) -> &[[f64; 2]] {
        self.positions.last().expect("rollout has at least the start row")
    }
}

/// Integrate each particle through the sample times with `substeps` Heun
/// steps per interval. Excursions beyond 1.5x the domain are clamped and
/// flagged rather than aborting.
pub fn rollout<F>(
    times: &[f64],
    substeps: usize,
    mu: f64,
    domain: &DomainBox,
    force: F,
    x0: &[[f64; 2]],
) -> RolloutResult
where
    F: Fn([f64; 2], f64) -> [f64; 2],
{
    assert!(substeps >= 1 && mu > 0.0 && times.len() >= 2);
    let safety = domain.expanded(1.5);
    let mut clamped = vec![false; x0.len()];
    let mut positions = Vec::with_capacity(times.len());
    positions.push(x0.to_vec());
    let mut current = x0.to_vec();
    for w in times.windows(2) {
        let dt = (w[1] - w[0]) / substeps as f64;
        for (i, x) in current.iter_mut().enumerate() {
            for s in 0..substeps {
                let t = w[0] + s as f64 * dt;
                let f1 = force(*x, t);
                let k1 = [f1[0] / mu, f1[1] / mu];
                let xe = [x[0] + dt * k1[0], x[1] + dt * k1[1]];
                let f2 = force(xe, t + dt);
                let k2 = [f2[0] / mu, f2[1] / mu];
                let mut next = [
                    x[0] + 0.5 * dt * (k1[0] + k2[0]),
                    x[1] + 0.5 * dt * (k1[1] + k2[1]),
                ];
                if !safety.contains(next, 0.0) {
                    next = safety.clamp(next);
                    clamped[i] = true;
                }
                *x = next;
            }
        }
        positions.push(current.clone());
    }
    RolloutResult { times: times.to_vec(), positions, clamped }
}

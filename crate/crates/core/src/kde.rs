//! Gaussian kernel density estimation over particle positions, bandwidth
//! selection, grid evaluation and the discretized L2 density loss.

use crate::diffengine::Real;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KdeError {
    #[error("grid geometry mismatch: {0:?} vs {1:?}")]
    GridMismatch(GridGeometry, GridGeometry),
}

/// Diagonal bandwidth; H^{1/2} = diag(h1, h2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidth {
    pub h1: f64,
    pub h2: f64,
}

impl Bandwidth {
    pub fn isotropic(h: f64) -> Self {
        assert!(h > 0.0);
        Bandwidth { h1: h, h2: h }
    }
}

/// h = 1.06 sigma n^{-1/5} per axis.
pub fn silverman_bandwidth(sigma: f64, n: usize) -> Bandwidth {
    assert!(sigma > 0.0, "target std must be positive");
    assert!(n >= 1);
    let h = 1.06 * sigma * (n as f64).powf(-0.2);
    Bandwidth::isotropic(h)
}

/// Uniform mesh with cell centers at lower bound + (index + 1/2) dx.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub x1_min: f64,
    pub x1_max: f64,
    pub x2_min: f64,
    pub x2_max: f64,
    pub nx1: usize,
    pub nx2: usize,
}

impl GridGeometry {
    pub fn square(min: f64, max: f64, n: usize) -> Self {
        GridGeometry { x1_min: min, x1_max: max, x2_min: min, x2_max: max, nx1: n, nx2: n }
    }

    pub fn dx1(&self) -> f64 {
        (self.x1_max - self.x1_min) / self.nx1 as f64
    }

    pub fn dx2(&self) -> f64 {
        (self.x2_max - self.x2_min) / self.nx2 as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx1() * self.dx2()
    }

    pub fn cell_count(&self) -> usize {
        self.nx1 * self.nx2
    }

    /// Row-major: index = i1 * nx2 + i2.
    pub fn center(&self, i1: usize, i2: usize) -> [f64; 2] {
        [
            self.x1_min + (i1 as f64 + 0.5) * self.dx1(),
            self.x2_min + (i2 as f64 + 0.5) * self.dx2(),
        ]
    }

    pub fn centers(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.nx1).flat_map(move |i1| (0..self.nx2).map(move |i2| self.center(i1, i2)))
    }

    pub fn validate(&self) -> bool {
        self.x1_min < self.x1_max && self.x2_min < self.x2_max && self.nx1 > 0 && self.nx2 > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub geom: GridGeometry,
    /// Row-major over (i1, i2) cell centers.
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn zeros(geom: GridGeometry) -> Self {
        DensityGrid { geom, values: vec![0.0; geom.cell_count()] }
    }

    /// Riemann mass: sum of values times cell area.
    pub fn integrated_mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.geom.cell_area()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "x1,x2,value")?;
        for (c, v) in self.geom.centers().zip(&self.values) {
            writeln!(w, "{},{},{}", c[0], c[1], v)?;
        }
        Ok(())
    }

    /// P2 (ASCII) PGM heatmap, linearly scaled to 0..255; the data min/max
    /// are recorded on the comment line.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let lo = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        writeln!(w, "P2")?;
        writeln!(w, "# min={} max={}", lo, hi)?;
        writeln!(w, "{} {}", self.geom.nx1, self.geom.nx2)?;
        writeln!(w, "255")?;
        let span = if hi > lo { hi - lo } else { 1.0 };
        // PGM rows scan x2 top to bottom
        for i2 in (0..self.geom.nx2).rev() {
            let mut row = String::new();
            for i1 in 0..self.geom.nx1 {
                let v = self.values[i1 * self.geom.nx2 + i2];
                let g = ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8;
                if !row.is_empty() {
                    row.push(' ');
                }
                row.push_str(&g.to_string());
            }
            writeln!(w, "{}", row)?;
        }
        Ok(())
    }
}

/// KDE field on the grid: values[i,j] = (1/n) sum_l K_H(x_{i,j} - x^(l)).
///
/// The arithmetic mirrors `kde_l2_loss_g` operation for operation so a grid
/// produced here is an exact zero of that loss: sum the unnormalized
/// exponentials per cell, then apply the kernel norm and 1/n once.
pub fn kde_evaluate(points: &[[f64; 2]], bw: Bandwidth, geom: GridGeometry) -> DensityGrid {
    assert!(!points.is_empty(), "KDE needs at least one point");
    let inv_n = 1.0 / points.len() as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * bw.h1 * bw.h2);
    let inv_h1 = 1.0 / bw.h1;
    let inv_h2 = 1.0 / bw.h2;
    let mut grid = DensityGrid::zeros(geom);
    for (cell, c) in grid.values.iter_mut().zip(geom.centers()) {
        let mut sum = 0.0;
        for p in points {
            let u = (c[0] - p[0]) * inv_h1;
            let v = (c[1] - p[1]) * inv_h2;
            sum += (-0.5 * (u * u + v * v)).exp();
        }
        *cell = sum * norm * inv_n;
    }
    grid
}

/// Sum over cells of (kde(points) - target)^2, generic so it can be
/// recorded on a tape with the particle positions as inputs.
pub fn kde_l2_loss_g<S: Real>(
    points: &[[S; 2]],
    bw: Bandwidth,
    geom: GridGeometry,
    target: &[f64],
) -> S {
    assert_eq!(target.len(), geom.cell_count());
    assert!(!points.is_empty());
    let sample = points[0][0];
    let inv_n = sample.lift(1.0 / points.len() as f64);
    let norm = sample.lift(1.0 / (2.0 * std::f64::consts::PI * bw.h1 * bw.h2));
    let inv_h1 = sample.lift(1.0 / bw.h1);
    let inv_h2 = sample.lift(1.0 / bw.h2);
    let half = sample.lift(-0.5);
    let mut loss = sample.lift(0.0);
    for (c, &t) in geom.centers().zip(target) {
        let mut density = sample.lift(0.0);
        for p in points {
            let u = (p[0].lift(c[0]) - p[0]) * inv_h1;
            let v = (p[1].lift(c[1]) - p[1]) * inv_h2;
            density = density + (half * (u * u + v * v)).exp();
        }
        let diff = density * norm * inv_n - sample.lift(t);
        loss = loss + diff * diff;
    }
    loss
}

/// Sum of squared cell-center differences (the raw sum the optimizer uses).
pub fn l2_density_loss(estimate: &DensityGrid, target: &DensityGrid) -> Result<f64, KdeError> {
    if estimate.geom != target.geom {
        return Err(KdeError::GridMismatch(estimate.geom, target.geom));
    }
    Ok(estimate
        .values
        .iter()
        .zip(&target.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Mean of squared cell differences, the form results are reported in.
pub fn mse(estimate: &DensityGrid, target: &DensityGrid) -> Result<f64, KdeError> {
    Ok(l2_density_loss(estimate, target)? / estimate.values.len() as f64)
}

/// N(mean, sigma^2 I) density at cell centers.
pub fn gaussian_target(mean: [f64; 2], sigma: f64, geom: GridGeometry) -> DensityGrid {
    assert!(sigma > 0.0);
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    let mut grid = DensityGrid::zeros(geom);
    for (cell, c) in grid.values.iter_mut().zip(geom.centers()) {
        let u = (c[0] - mean[0]) / sigma;
        let v = (c[1] - mean[1]) / sigma;
        *cell = norm * (-0.5 * (u * u + v * v)).exp();
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn silverman_examples() {
        let bw = silverman_bandwidth(0.5e-3, 450);
        assert_relative_eq!(bw.h1, 1.5618e-4, max_relative = 1e-3);
        let bw = silverman_bandwidth(1.0, 1);
        assert_relative_eq!(bw.h1, 1.06, max_relative = 1e-12);
        // 32^{1/5} = 2 exactly
        let bw = silverman_bandwidth(2.0, 32);
        assert_relative_eq!(bw.h1, 1.06, max_relative = 1e-12);
        assert_relative_eq!(bw.h2, bw.h1);
    }

    #[test]
    fn single_particle_peak() {
        let geom = GridGeometry::square(0.0, 1.0, 16);
        let h = 0.1;
        let center = geom.center(8, 8);
        let grid = kde_evaluate(&[center], Bandwidth::isotropic(h), geom);
        let peak = grid.values[8 * 16 + 8];
        assert_relative_eq!(peak, 1.0 / (2.0 * std::f64::consts::PI * h * h), max_relative = 1e-12);
    }

    #[test]
    fn coincident_particles_match_single() {
        let geom = GridGeometry::square(0.0, 1.0, 16);
        let bw = Bandwidth::isotropic(0.08);
        let p = [0.4, 0.6];
        let one = kde_evaluate(&[p], bw, geom);
        let many = kde_evaluate(&[p; 7], bw, geom);
        for (a, b) in one.values.iter().zip(&many.values) {
            assert_relative_eq!(a, b, epsilon = 1e-13);
        }
    }

    #[test]
    fn mass_is_conserved_under_stated_resolution() {
        let geom = GridGeometry::square(0.0, 1.0, 64);
        let h = 0.04; // dx = 1/64 <= h/2, margin 5h = 0.2
        let pts = [[0.3, 0.4], [0.5, 0.5], [0.7, 0.65], [0.25, 0.75]];
        let grid = kde_evaluate(&pts, Bandwidth::isotropic(h), geom);
        let mass = grid.integrated_mass();
        assert!((mass - 1.0).abs() < 1e-2, "mass {mass}");
    }

    #[test]
    fn l2_loss_basics() {
        let geom = GridGeometry::square(0.0, 1.0, 8);
        let a = gaussian_target([0.5, 0.5], 0.2, geom);
        assert_relative_eq!(l2_density_loss(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        let kappa = 0.37;
        for v in &mut b.values {
            *v += kappa;
        }
        let m = geom.cell_count() as f64;
        assert_relative_eq!(l2_density_loss(&a, &b).unwrap(), m * kappa * kappa, max_relative = 1e-12);
        // symmetry
        assert_relative_eq!(
            l2_density_loss(&a, &b).unwrap(),
            l2_density_loss(&b, &a).unwrap()
        );
        let other = DensityGrid::zeros(GridGeometry::square(0.0, 1.0, 9));
        assert!(l2_density_loss(&a, &other).is_err());
    }

    #[test]
    fn l2_loss_matches_brute_force() {
        let geom = GridGeometry::square(-1.0, 1.0, 5);
        let mut a = DensityGrid::zeros(geom);
        let mut b = DensityGrid::zeros(geom);
        for (i, (va, vb)) in a.values.iter_mut().zip(&mut b.values).enumerate() {
            *va = (i as f64 * 0.37).sin();
            *vb = (i as f64 * 0.11).cos();
        }
        let mut expected = 0.0f64;
        for i in 0..geom.cell_count() {
            let d = a.values[i] - b.values[i];
            expected += d * d;
        }
        assert_relative_eq!(l2_density_loss(&a, &b).unwrap(), expected, max_relative = 1e-14);
    }

    #[test]
    fn gaussian_target_properties() {
        let geom = GridGeometry::square(-1.0, 1.0, 64);
        let sigma = 0.15;
        let grid = gaussian_target([0.0, 0.0], sigma, geom);
        // peak at the mean
        let center_val = grid.values[32 * 64 + 32];
        let peak = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
        assert!(center_val <= peak && center_val > 0.9 * peak);
        // symmetry about the mean
        for i in 0..64 {
            for j in 0..64 {
                let v = grid.values[i * 64 + j];
                let w = grid.values[(63 - i) * 64 + (63 - j)];
                assert_relative_eq!(v, w, epsilon = 1e-12);
            }
        }
        // integrated mass
        assert!((grid.integrated_mass() - 1.0).abs() < 1e-2);
    }

    #[test]
    fn loss_g_matches_grid_path() {
        let geom = GridGeometry::square(0.0, 1.0, 12);
        let bw = Bandwidth::isotropic(0.1);
        let pts = [[0.3, 0.4], [0.6, 0.55]];
        let target = gaussian_target([0.5, 0.5], 0.2, geom);
        let est = kde_evaluate(&pts, bw, geom);
        let via_grids = l2_density_loss(&est, &target).unwrap();
        let direct = kde_l2_loss_g(&pts, bw, geom, &target.values);
        assert_relative_eq!(via_grids, direct, max_relative = 1e-12);
    }

    proptest! {
        #[test]
        fn kde_nonnegative_and_translation_equivariant(
            shift in -5.0f64..5.0,
            px in 0.2f64..0.8,
            py in 0.2f64..0.8,
        ) {
            let geom = GridGeometry::square(0.0, 1.0, 16);
            let bw = Bandwidth::isotropic(0.07);
            let pts = [[px, py], [1.0 - px, 1.0 - py]];
            let base = kde_evaluate(&pts, bw, geom);
            for &v in &base.values {
                prop_assert!(v >= 0.0);
            }
            let shifted_geom = GridGeometry {
                x1_min: geom.x1_min + shift,
                x1_max: geom.x1_max + shift,
                x2_min: geom.x2_min + shift,
                x2_max: geom.x2_max + shift,
                ..geom
            };
            let shifted_pts: Vec<[f64; 2]> =
                pts.iter().map(|p| [p[0] + shift, p[1] + shift]).collect();
            let moved = kde_evaluate(&shifted_pts, bw, shifted_geom);
            for (a, b) in base.values.iter().zip(&moved.values) {
                prop_assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn permuting_particles_leaves_loss_unchanged(seed in 0u64..1000) {
            let geom = GridGeometry::square(0.0, 1.0, 8);
            let bw = Bandwidth::isotropic(0.1);
            let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
            let mut next = || {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            };
            let pts: Vec<[f64; 2]> = (0..6).map(|_| [next(), next()]).collect();
            let mut rev = pts.clone();
            rev.reverse();
            let target = gaussian_target([0.5, 0.5], 0.2, geom);
            let a = kde_l2_loss_g(&pts, bw, geom, &target.values);
            let b = kde_l2_loss_g(&rev, bw, geom, &target.values);
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}

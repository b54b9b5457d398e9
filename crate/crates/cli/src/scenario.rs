//! Scenario files: a strict JSON schema holding every knob of a run.
//! Unknown keys are rejected and physical quantities carry their unit in
//! the key name (lengths in millimeters of the scaled bench, times in
//! seconds, potentials in volts).

use depshaper_core::capmodel::CapacitanceModel;
use depshaper_core::field::{ElectrodeArray, FieldConstants};
use depshaper_core::kde::{gaussian_target, silverman_bandwidth, Bandwidth, GridGeometry};
use depshaper_core::solver::{ControlProblem, DomainBox, DualConfig, SolverMode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub deterministic: bool,
    pub mode: ScenarioMode,
    pub domain_mm: DomainSpec,
    pub horizon_s: f64,
    #[serde(default)]
    pub time_samples: Option<usize>,
    /// Explicit sample times; overrides `time_samples` when present.
    #[serde(default)]
    pub time_grid_s: Option<Vec<f64>>,
    pub electrodes: ElectrodeSpec,
    pub capacitance: CapacitanceSpec,
    pub physics: PhysicsSpec,
    pub particles: ParticleSpec,
    pub target: TargetSpec,
    pub bandwidth: BandwidthSpec,
    pub dual: DualSpec,
    pub optimizer: OptimizerSpec,
    pub networks: NetworkSpec,
    #[serde(default)]
    pub collocation: CollocationSpec,
    #[serde(default)]
    pub snapshot_times_s: Vec<f64>,
    #[serde(default = "default_substeps")]
    pub rollout_substeps: usize,
}

fn default_substeps() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioMode {
    ContinuousMap,
    DiscreteCollocation,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub x1_min: f64,
    pub x1_max: f64,
    pub x2_min: f64,
    pub x2_max: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElectrodeSpec {
    pub nx: usize,
    pub ny: usize,
    pub pitch_mm: f64,
    pub v_max_volts: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacitanceSpec {
    pub a: f64,
    pub c_mm: f64,
    pub delta_mm: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsSpec {
    pub mu: f64,
    pub energy_scale: f64,
    pub gh_order: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum ParticleSpec {
    /// `count` particles on a centered square lattice; count must be a
    /// perfect square.
    UniformGrid { count: usize },
    Explicit { positions_mm: Vec<[f64; 2]> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum TargetSpec {
    Gaussian {
        mean_mm: [f64; 2],
        sigma_mm: f64,
        grid_cells: usize,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum BandwidthSpec {
    /// h = 1.06 sigma n^(-1/5) from the target spread.
    Silverman,
    Fixed { h_mm: f64 },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualSpec {
    pub lambda0: f64,
    pub alpha: f64,
    pub cadence: usize,
    pub residual_tol: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub max_iters: usize,
    pub lr: f64,
    #[serde(default = "default_box_weight")]
    pub box_weight: f64,
    #[serde(default)]
    pub stop_fraction: f64,
}

fn default_box_weight() -> f64 {
    10.0
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub trajectory_hidden: usize,
    pub potential_hidden: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollocationSpec {
    pub volt_init_frac: f64,
}

impl Default for CollocationSpec {
    fn default() -> Self {
        CollocationSpec { volt_init_frac: 0.02 }
    }
}

impl Scenario {
    pub fn from_json(s: &str) -> Result<Self, String> {
        let de = &mut serde_json::Deserializer::from_str(s);
        serde_path_to_error::deserialize(de)
            .map_err(|e| format!("/{}: {}", e.path().to_string().replace('.', "/"), e.inner()))
    }

    pub fn times(&self) -> Result<Vec<f64>, String> {
        if let Some(grid) = &self.time_grid_s {
            return Ok(grid.clone());
        }
        let n = self
            .time_samples
            .ok_or("either time_samples or time_grid_s is required")?;
        if n < 2 {
            return Err("time_samples must be at least 2".into());
        }
        Ok((0..n)
            .map(|k| k as f64 * self.horizon_s / (n - 1) as f64)
            .collect())
    }

    pub fn initial_positions(&self) -> Result<Vec<[f64; 2]>, String> {
        match &self.particles {
            ParticleSpec::Explicit { positions_mm } => {
                if positions_mm.is_empty() {
                    return Err("particles/positions_mm must not be empty".into());
                }
                Ok(positions_mm.clone())
            }
            ParticleSpec::UniformGrid { count } => {
                let side = (*count as f64).sqrt().round() as usize;
                if side * side != *count || side == 0 {
                    return Err(format!(
                        "particles/count: {count} is not a positive perfect square"
                    ));
                }
                let d = &self.domain_mm;
                let w1 = (d.x1_max - d.x1_min) / side as f64;
                let w2 = (d.x2_max - d.x2_min) / side as f64;
                let mut out = Vec::with_capacity(*count);
                for i in 0..side {
                    for j in 0..side {
                        out.push([
                            d.x1_min + (i as f64 + 0.5) * w1,
                            d.x2_min + (j as f64 + 0.5) * w2,
                        ]);
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn bandwidth(&self) -> Bandwidth {
        match self.bandwidth {
            BandwidthSpec::Fixed { h_mm } => Bandwidth::isotropic(h_mm),
            BandwidthSpec::Silverman => {
                let TargetSpec::Gaussian { sigma_mm, .. } = self.target;
                let n = match &self.particles {
                    ParticleSpec::Explicit { positions_mm } => positions_mm.len(),
                    ParticleSpec::UniformGrid { count } => *count,
                };
                silverman_bandwidth(sigma_mm, n)
            }
        }
    }

    pub fn build_problem(&self) -> Result<ControlProblem, String> {
        let d = &self.domain_mm;
        let domain = DomainBox {
            x1: [d.x1_min, d.x1_max],
            x2: [d.x2_min, d.x2_max],
        };
        let TargetSpec::Gaussian { mean_mm, sigma_mm, grid_cells } = self.target;
        if grid_cells < 2 {
            return Err("target/grid_cells must be at least 2".into());
        }
        // target and loss grid share the domain box (square domains only
        // get a square geometry; rectangles keep per-axis extents)
        let geom = GridGeometry {
            x1_min: d.x1_min,
            x1_max: d.x1_max,
            x2_min: d.x2_min,
            x2_max: d.x2_max,
            nx1: grid_cells,
            nx2: grid_cells,
        };
        let cap = CapacitanceModel::single(
            self.capacitance.a,
            self.capacitance.c_mm,
            self.capacitance.delta_mm,
        );
        let problem = ControlProblem {
            domain,
            horizon: self.horizon_s,
            times: self.times()?,
            array: ElectrodeArray::grid(
                self.electrodes.nx,
                self.electrodes.ny,
                d.x1_min,
                d.x2_min,
                self.electrodes.pitch_mm,
                self.electrodes.v_max_volts,
            ),
            consts: FieldConstants::new(
                self.physics.mu,
                cap.sigma(),
                self.physics.energy_scale,
                self.physics.gh_order,
            ),
            cap,
            initial: self.initial_positions()?,
            target: gaussian_target(mean_mm, sigma_mm, geom),
            bandwidth: self.bandwidth(),
            v_max: self.electrodes.v_max_volts,
            dual: DualConfig {
                lambda0: self.dual.lambda0,
                alpha: self.dual.alpha,
                cadence: self.dual.cadence,
                residual_tol: self.dual.residual_tol,
            },
            mode: match self.mode {
                ScenarioMode::ContinuousMap => SolverMode::ContinuousMap,
                ScenarioMode::DiscreteCollocation => SolverMode::DiscreteCollocation,
            },
        };
        problem.validate().map_err(|e| e.to_string())?;
        Ok(problem)
    }
}

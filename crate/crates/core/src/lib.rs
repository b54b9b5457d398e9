//! Density shaping for dielectrophoretically driven micro-particles:
//! capacitance modeling, differentiable particle dynamics, kernel density
//! targets, and the potential-map optimizer behind the `depshaper` CLI.

pub mod capmodel;
pub mod diffengine;
pub mod field;
pub mod kde;
pub mod nnmap;
pub mod optim;
pub mod quadrature;
pub mod solver;

pub use capmodel::{CapacitanceModel, CapacitanceSamples, CapTerm};
pub use diffengine::{Dual, Real, Tape, Var, D1, D2};
pub use field::{ElectrodeArray, FieldConstants, PotentialField};
pub use kde::{Bandwidth, DensityGrid, GridGeometry};
pub use nnmap::{Mlp, MlpShape, OutputTransform};
pub use quadrature::GHRule;
pub use solver::{ControlProblem, DomainBox, PotentialMap, SolveReport, TrajectoryNets};

//! Minimizing-movement solver for one-dimensional fourth-order cross-diffusion
//! systems that are gradient flows of a gradient-dependent free energy in a
//! transport metric with concave, degenerate mobilities.
//!
//! The crate is organised bottom-up:
//!
//! * [`value_space`]: the value cuboid, reference state and entropy/mobility pairs.
//! * [`grid`]: the truncated uniform grid, fields, stencils, quadrature and norms.
//! * [`free_energy`]: energy densities, the discrete energy, its variational
//!   derivative and the nonlinear operator of the weak formulation.
//! * [`transport`]: staggered transport paths, the action, the pointwise
//!   perspective prox and the distance solve.
//! * [`jko`]: the minimizing-movement stepper and trajectory driver.
//! * [`diagnostics`]: executable versions of the a-priori estimates.

pub mod diagnostics;
pub mod free_energy;
pub mod grid;
pub mod jko;
pub mod transport;
pub mod value_space;

mod banded;
mod error;

pub use error::{Error, Result};
pub use free_energy::{
    CahnHilliardParams, DensityFunction, EnergyDensity, Potential, QuadraticDensity,
};
pub use grid::{Grid1D, GridField};
pub use jko::{JkoConfig, JkoStep, Trajectory, TrajectoryRecord};
pub use transport::{SolveReport, SolverMethod, SolverOptions, TransportPath};
pub use value_space::{CaseTag, EntropyMobilityPair, ValueSpace};

//! Minimizing-movement time stepping.
//!
//! Each step minimizes `action(path)/(2τ) + E(ρ^K)` jointly over paths that
//! start at the previous state, with the final density free. The Newton solve
//! starts from the constant path, whose objective is `E(u_prev)`, and the line
//! search never accepts an increase, so `E(u_next) + W²/(2τ) ≤ E(u_prev)` holds
//! for every returned step.

use serde::{Deserialize, Serialize};

use crate::free_energy::{energy_unchecked, EnergyDensity};
use crate::grid::{self, GridField};
use crate::transport::{self, newton_minimize, PathProblem, SolveReport, SolverMethod, SolverOptions, TransportPath};
use crate::value_space::{heat_entropy, EntropyMobilityPair};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JkoConfig {
    pub tau: f64,
    pub steps: usize,
    pub inner_steps: usize,
    pub solver: SolverOptions,
    /// Keep a snapshot every this many steps (the first and last state are always kept).
    pub snapshot_stride: usize,
}

impl JkoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidArgument(format!("tau = {} must be positive", self.tau)));
        }
        if self.inner_steps == 0 {
            return Err(Error::InvalidArgument("inner_steps must be positive".into()));
        }
        if self.snapshot_stride == 0 {
            return Err(Error::InvalidArgument("snapshot_stride must be positive".into()));
        }
        if !(self.solver.tolerance > 0.0) || self.solver.max_iterations == 0 {
            return Err(Error::InvalidArgument("solver tolerance and iteration cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct JkoStep {
    pub u_next: GridField,
    pub path: TransportPath,
    pub step_distance: f64,
    /// `step_distance²/(2τ) + E(u_next)`.
    pub objective: f64,
    pub report: SolveReport,
}

/// One minimizing-movement step from a state strictly inside the cuboid.
pub fn jko_step(
    u_prev: &GridField,
    density: &EnergyDensity,
    pairs: &[EntropyMobilityPair],
    tau: f64,
    inner_steps: usize,
    opts: &SolverOptions,
) -> Result<JkoStep> {
    u_prev.validate_in(density.space())?;
    if pairs.len() != u_prev.components() {
        return Err(Error::Dimension(format!("{} pairs for {} components", pairs.len(), u_prev.components())));
    }
    let interior = pairs
        .iter()
        .enumerate()
        .all(|(j, p)| u_prev.component(j).iter().all(|&v| v > p.lower() && v < p.upper()));
    if !interior {
        return Err(Error::NotInterior);
    }
    let problem = PathProblem::jko(u_prev, density.function(), pairs, tau, inner_steps)?;
    let (x, objective, iterations, residual) = newton_minimize(&problem, problem.initial_point(), opts)?;
    let path = problem.path(&x);
    let u_next = path.density(inner_steps);
    let kinetic = transport::action(&path, pairs)?;
    let report = SolveReport {
        method: SolverMethod::Newton,
        iterations,
        residual,
        constraint_residual: transport::continuity_residual(&path),
        converged: true,
    };
    Ok(JkoStep {
        u_next,
        path,
        step_distance: kinetic.max(0.0).sqrt(),
        objective,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub time: f64,
    pub energy: f64,
    pub heat_entropy: f64,
    pub masses: Vec<f64>,
    pub second_moments: Vec<f64>,
    pub step_distance: f64,
    pub h2_seminorm: f64,
    pub solver: Option<SolveReport>,
}

impl TrajectoryRecord {
    pub fn new(
        step: usize,
        time: f64,
        u: &GridField,
        density: &EnergyDensity,
        pairs: &[EntropyMobilityPair],
        step_distance: f64,
        solver: Option<SolveReport>,
    ) -> Result<Self> {
        let space = density.space();
        Ok(Self {
            step,
            time,
            energy: energy_unchecked(density.function(), u),
            heat_entropy: heat_entropy(space, pairs, u)?,
            masses: grid::mass_vector(u, space)?,
            second_moments: grid::second_moment(u, space)?,
            step_distance,
            h2_seminorm: grid::h2_seminorm(u, space)?,
            solver,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub tau: f64,
    pub records: Vec<TrajectoryRecord>,
    /// Every state `u^0, u^1, …`.
    pub states: Vec<GridField>,
    /// Step indices of the snapshots handed to the hook.
    pub snapshots: Vec<usize>,
    pub warnings: Vec<String>,
}

impl Trajectory {
    /// Piecewise-constant interpolant `t ↦ u^{⌈t/τ⌉}`, clamped to the last state.
    pub fn interpolant(&self, t: f64) -> &GridField {
        let k = if t <= 0.0 { 0 } else { (t / self.tau - 1e-9).ceil() as usize };
        &self.states[k.min(self.states.len() - 1)]
    }

    pub fn final_state(&self) -> &GridField {
        self.states.last().expect("a trajectory holds its initial state")
    }
}

/// A failed step together with everything computed before it.
#[derive(Debug)]
pub struct TrajectoryFailure {
    pub error: Error,
    pub step: usize,
    pub partial: Trajectory,
}

impl std::fmt::Display for TrajectoryFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step {} failed: {}", self.step, self.error)
    }
}

impl std::error::Error for TrajectoryFailure {}

/// Boundary drift beyond which the truncation of the domain is reported.
pub const TRUNCATION_WARNING: f64 = 1e-6;

/// Iterates [`jko_step`], recording every state and calling `on_snapshot` for
/// the initial state, every `snapshot_stride`-th step and the final state.
pub fn run_trajectory(
    u0: &GridField,
    density: &EnergyDensity,
    pairs: &[EntropyMobilityPair],
    config: &JkoConfig,
    mut on_snapshot: impl FnMut(usize, &GridField),
) -> std::result::Result<Trajectory, Box<TrajectoryFailure>> {
    let mut trajectory = Trajectory {
        tau: config.tau,
        records: Vec::with_capacity(config.steps + 1),
        states: Vec::with_capacity(config.steps + 1),
        snapshots: Vec::new(),
        warnings: Vec::new(),
    };
    let fail = |error: Error, step: usize, partial: Trajectory| Box::new(TrajectoryFailure { error, step, partial });
    if let Err(e) = config.validate() {
        return Err(fail(e, 0, trajectory));
    }
    match TrajectoryRecord::new(0, 0.0, u0, density, pairs, 0.0, None) {
        Ok(r) => trajectory.records.push(r),
        Err(e) => return Err(fail(e, 0, trajectory)),
    }
    trajectory.states.push(u0.clone());
    trajectory.snapshots.push(0);
    on_snapshot(0, u0);
    let reference = density.space().reference().to_vec();
    let mut warned = vec![false; u0.components()];
    for k in 1..=config.steps {
        let prev = trajectory.states.last().expect("initial state pushed");
        let step = match jko_step(prev, density, pairs, config.tau, config.inner_steps, &config.solver) {
            Ok(s) => s,
            Err(e) => return Err(fail(e, k, trajectory)),
        };
        let record = TrajectoryRecord::new(
            k,
            k as f64 * config.tau,
            &step.u_next,
            density,
            pairs,
            step.step_distance,
            Some(step.report),
        );
        match record {
            Ok(r) => trajectory.records.push(r),
            Err(e) => return Err(fail(e, k, trajectory)),
        }
        let cells = step.u_next.grid().cells();
        for (j, seen) in warned.iter_mut().enumerate() {
            let c = step.u_next.component(j);
            let drift = (c[0] - reference[j]).abs().max((c[cells - 1] - reference[j]).abs());
            if !*seen && drift > TRUNCATION_WARNING {
                *seen = true;
                trajectory.warnings.push(format!(
                    "step {k}: component {j} deviates from the reference state by {drift:.3e} at the domain boundary"
                ));
            }
        }
        if k % config.snapshot_stride == 0 || k == config.steps {
            trajectory.snapshots.push(k);
            on_snapshot(k, &step.u_next);
        }
        trajectory.states.push(step.u_next);
    }
    Ok(trajectory)
}

//! Scenario files: a TOML document with `schema_version = 1`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use mmflow_core::free_energy::{make_cahn_hilliard, CahnHilliardParams};
use mmflow_core::{
    CaseTag, EnergyDensity, EntropyMobilityPair, Grid1D, GridField, JkoConfig, Potential, QuadraticDensity,
    SolverMethod, SolverOptions, ValueSpace,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::io;

pub const SCHEMA_VERSION: u32 = 1;

/// The sampled lower coercivity constant is clamped to this value when it fails.
const COERCIVITY_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl From<mmflow_core::Error> for ConfigError {
    fn from(e: mmflow_core::Error) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub value_space: ValueSpaceBlock,
    pub grid: GridBlock,
    pub energy: EnergyBlock,
    #[serde(default)]
    pub mobility: MobilityBlock,
    #[serde(default)]
    pub initial: Vec<Generator>,
    pub jko: JkoBlock,
    #[serde(default)]
    pub diagnostics: DiagnosticsBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueSpaceBlock {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Required in case B; case A uses the lower corner.
    #[serde(default)]
    pub reference: Option<Vec<f64>>,
    pub case: CaseTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub half_length: f64,
    pub cells: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyFamily {
    CahnHilliard,
    Generalized,
    CustomCoefficients,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyBlock {
    pub family: EnergyFamily,
    /// Rows of `Γ`.
    #[serde(default)]
    pub gamma: Vec<Vec<f64>>,
    /// Per component, coefficients of `Ψ_j` in powers of `z_j − z̄_j`.
    #[serde(default)]
    pub psi: Vec<Vec<f64>>,
    #[serde(default)]
    pub epsilon: f64,
    /// Exponential weights `μ` of the generalized family.
    #[serde(default)]
    pub mu: Vec<f64>,
    /// Rows of the `2n × 2n` matrix `Q` of `f = ½ yᵀQy`, `y = (p, z − z̄)`.
    #[serde(default)]
    pub quadratic: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MobilityFamily {
    #[default]
    Logarithmic,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MobilityBlock {
    #[serde(default)]
    pub family: MobilityFamily,
    /// Custom family: per-component factors `c_j` of `m_j = c_j·(s−a)(b−s)/(b−a)`.
    #[serde(default)]
    pub scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    GaussianBump {
        center: f64,
        width: f64,
        amplitude: f64,
        #[serde(default)]
        component: usize,
    },
    Plateau {
        edges: [f64; 2],
        height: f64,
        /// Width of the tanh edges; defaults to two cells.
        #[serde(default)]
        smoothing: Option<f64>,
        #[serde(default)]
        component: usize,
    },
    /// Replaces the field built so far by a snapshot file.
    FromFile { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JkoBlock {
    pub tau: f64,
    pub steps: usize,
    pub inner_steps: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_stride")]
    pub snapshot_stride: usize,
    #[serde(default)]
    pub method: SolverMethod,
}

fn default_tolerance() -> f64 {
    SolverOptions::default().tolerance
}

fn default_max_iterations() -> usize {
    SolverOptions::default().max_iterations
}

fn default_stride() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsBlock {
    /// Checks run by `verify` when none are given on the command line.
    #[serde(default)]
    pub checks: Vec<String>,
    #[serde(default = "default_q")]
    pub q: f64,
    /// Defaults to `[1, T_end]`.
    #[serde(default)]
    pub decay_window: Option<[f64; 2]>,
    /// Temporal test function `ψ`; defaults to centre `T/2`, radius `0.4·T`.
    #[serde(default)]
    pub psi_center: Option<f64>,
    #[serde(default)]
    pub psi_radius: Option<f64>,
    /// Spatial test function `ρ`, applied to every component.
    #[serde(default)]
    pub rho_center: f64,
    /// Defaults to `L/2`.
    #[serde(default)]
    pub rho_radius: Option<f64>,
    #[serde(default = "default_heat_duration")]
    pub heat_duration: f64,
    #[serde(default = "default_heat_substeps")]
    pub heat_substeps: usize,
}

impl Default for DiagnosticsBlock {
    fn default() -> Self {
        Self {
            checks: Vec::new(),
            q: default_q(),
            decay_window: None,
            psi_center: None,
            psi_radius: None,
            rho_center: 0.0,
            rho_radius: None,
            heat_duration: default_heat_duration(),
            heat_substeps: default_heat_substeps(),
        }
    }
}

fn default_q() -> f64 {
    0.4
}

fn default_heat_duration() -> f64 {
    0.01
}

fn default_heat_substeps() -> usize {
    8
}

/// Everything needed to run a scenario.
pub struct Scenario {
    pub space: ValueSpace,
    pub grid: Grid1D,
    pub density: EnergyDensity,
    pub pairs: Vec<EntropyMobilityPair>,
    pub initial: GridField,
    pub jko: JkoConfig,
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Ok((Self::parse(&text)?, text))
    }

    pub fn final_time(&self) -> f64 {
        self.jko.tau * self.jko.steps as f64
    }

    /// Replaces `τ` and rescales the step count so that the final time is kept.
    pub fn override_tau(&mut self, tau: f64) {
        let end = self.final_time();
        self.jko.tau = tau;
        self.jko.steps = ((end / tau).round() as usize).max(1);
    }

    pub fn value_space(&self) -> Result<ValueSpace, ConfigError> {
        let vs = &self.value_space;
        Ok(match vs.case {
            CaseTag::A => ValueSpace::case_a(vs.lower.clone(), vs.upper.clone())?,
            CaseTag::B => {
                let reference = vs
                    .reference
                    .clone()
                    .ok_or_else(|| ConfigError::Invalid("case B needs value_space.reference".into()))?;
                ValueSpace::case_b(vs.lower.clone(), vs.upper.clone(), reference)?
            }
        })
    }

    /// Validates every block and builds the core objects. Relative paths of
    /// `from_file` generators are resolved against `base`.
    pub fn build(&self, base: &Path) -> Result<Scenario, ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Invalid(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let space = self.value_space()?;
        let n = space.components();
        let grid = Grid1D::new(self.grid.half_length, self.grid.cells)?;
        let density = self.density(&space)?;
        if !(density.coercivity_lower() > COERCIVITY_FLOOR) {
            return Err(ConfigError::Invalid(
                "the energy density is not uniformly convex in the gradient on the value space".into(),
            ));
        }
        let pairs = self.pairs(&space)?;
        let initial = self.initial_field(&space, grid, base)?;
        if !initial.is_interior(&space) {
            return Err(ConfigError::Invalid(
                "initial data must lie strictly inside the value space in every cell".into(),
            ));
        }
        let jko = JkoConfig {
            tau: self.jko.tau,
            steps: self.jko.steps,
            inner_steps: self.jko.inner_steps,
            solver: SolverOptions {
                tolerance: self.jko.tolerance,
                max_iterations: self.jko.max_iterations,
                method: self.jko.method,
            },
            snapshot_stride: self.jko.snapshot_stride,
        };
        jko.validate()?;
        let d = &self.diagnostics;
        if space.case() == CaseTag::A && !(d.q > 1.0 / 3.0) {
            return Err(ConfigError::Invalid(format!("diagnostics.q = {} must exceed 1/3", d.q)));
        }
        if d.heat_substeps < 4 || !(d.heat_duration > 0.0) {
            return Err(ConfigError::Invalid("heat flow check needs duration > 0 and at least 4 substeps".into()));
        }
        debug_assert_eq!(initial.components(), n);
        Ok(Scenario {
            space,
            grid,
            density,
            pairs,
            initial,
            jko,
        })
    }

    fn density(&self, space: &ValueSpace) -> Result<EnergyDensity, ConfigError> {
        let n = space.components();
        let e = &self.energy;
        let matrix = |rows: &[Vec<f64>], size: usize, label: &str| -> Result<DMatrix<f64>, ConfigError> {
            if rows.len() != size || rows.iter().any(|r| r.len() != size) {
                return Err(ConfigError::Invalid(format!("energy.{label} must be {size}x{size}")));
            }
            Ok(DMatrix::from_fn(size, size, |i, j| rows[i][j]))
        };
        match e.family {
            EnergyFamily::CahnHilliard | EnergyFamily::Generalized => {
                let a_weights = match e.family {
                    EnergyFamily::Generalized => {
                        if e.mu.len() != n {
                            return Err(ConfigError::Invalid(format!("energy.mu needs {n} entries")));
                        }
                        Some(e.mu.clone())
                    }
                    _ => None,
                };
                let params = CahnHilliardParams {
                    gamma: matrix(&e.gamma, n, "gamma")?,
                    psi: Potential::new(space.reference(), e.psi.clone())?,
                    epsilon: e.epsilon,
                    a_weights,
                };
                Ok(make_cahn_hilliard(params, space)?)
            }
            EnergyFamily::CustomCoefficients => {
                let q = matrix(&e.quadratic, 2 * n, "quadratic")?;
                let f = QuadraticDensity::new(q, space.reference())?;
                Ok(EnergyDensity::new(Arc::new(f), space)?)
            }
        }
    }

    pub fn pairs(&self, space: &ValueSpace) -> Result<Vec<EntropyMobilityPair>, ConfigError> {
        match self.mobility.family {
            MobilityFamily::Logarithmic => Ok(space.logarithmic_pairs()),
            MobilityFamily::Custom => {
                let n = space.components();
                if self.mobility.scale.len() != n {
                    return Err(ConfigError::Invalid(format!("mobility.scale needs {n} entries")));
                }
                (0..n)
                    .map(|j| {
                        let (a, b, c) = (space.lower()[j], space.upper()[j], self.mobility.scale[j]);
                        if !(c > 0.0 && c.is_finite()) {
                            return Err(ConfigError::Invalid(format!("mobility.scale[{j}] = {c} must be positive")));
                        }
                        let d = b - a;
                        let xlogx = |t: f64| if t > 0.0 { t * t.ln() } else { 0.0 };
                        let pair = EntropyMobilityPair::custom(
                            a,
                            b,
                            move |s| (xlogx(s - a) + xlogx(b - s) - xlogx(d)) / c,
                            move |s| ((s - a) / (b - s)).ln() / c,
                            move |s| c * (s - a) * (b - s) / d,
                        )?;
                        Ok(pair.with_component(j))
                    })
                    .collect()
            }
        }
    }

    fn initial_field(&self, space: &ValueSpace, grid: Grid1D, base: &Path) -> Result<GridField, ConfigError> {
        let n = space.components();
        let mut u = GridField::constant(grid, space.reference());
        for g in &self.initial {
            match g {
                Generator::GaussianBump {
                    center,
                    width,
                    amplitude,
                    component,
                } => {
                    check_component(*component, n)?;
                    if !(*width > 0.0) {
                        return Err(ConfigError::Invalid(format!("gaussian_bump width {width} must be positive")));
                    }
                    for (i, v) in u.component_mut(*component).iter_mut().enumerate() {
                        *v += amplitude * (-((grid.center(i) - center) / width).powi(2)).exp();
                    }
                }
                Generator::Plateau {
                    edges,
                    height,
                    smoothing,
                    component,
                } => {
                    check_component(*component, n)?;
                    let s = smoothing.unwrap_or(2.0 * grid.spacing());
                    if !(edges[0] < edges[1]) || !(s > 0.0) {
                        return Err(ConfigError::Invalid("plateau needs edges[0] < edges[1] and positive smoothing".into()));
                    }
                    for (i, v) in u.component_mut(*component).iter_mut().enumerate() {
                        let x = grid.center(i);
                        *v += 0.5 * height * (((x - edges[0]) / s).tanh() - ((x - edges[1]) / s).tanh());
                    }
                }
                Generator::FromFile { path } => {
                    let path = if path.is_absolute() { path.clone() } else { base.join(path) };
                    u = io::read_field(&path, grid, n).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                }
            }
        }
        Ok(u)
    }
}

fn check_component(component: usize, n: usize) -> Result<(), ConfigError> {
    if component >= n {
        return Err(ConfigError::Invalid(format!("component {component} out of range for {n} components")));
    }
    Ok(())
}

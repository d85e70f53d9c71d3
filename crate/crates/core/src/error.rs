use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid interval: lower {lower} must be below upper {upper}")]
    InvalidInterval { lower: f64, upper: f64 },

    #[error("invalid value space: {0}")]
    InvalidValueSpace(String),

    #[error("entropy/mobility pair violates its hypotheses: {0}")]
    InvalidPair(String),

    #[error("value {value} of component {component} at cell {cell} lies outside [{lower}, {upper}]")]
    OutsideValueSpace {
        component: usize,
        cell: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("invalid energy density: {0}")]
    InvalidDensity(String),

    #[error("degenerate sampling: only {valid} of {requested} samples were usable")]
    DegenerateSampling { valid: usize, requested: usize },

    #[error("support touches the domain boundary")]
    SupportTouchesBoundary,

    #[error("component {component} masses differ: {left} vs {right}")]
    MassMismatch {
        component: usize,
        left: f64,
        right: f64,
    },

    #[error("root finder failed to bracket the prox optimality equation")]
    Bracket,

    #[error("solver did not converge after {iterations} iterations (best objective {best_value}, residual {residual:e})")]
    NotConverged {
        iterations: usize,
        best_value: f64,
        residual: f64,
    },

    #[error("state is not strictly inside the value space")]
    NotInterior,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

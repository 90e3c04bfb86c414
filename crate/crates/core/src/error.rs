use thiserror::Error;

/// Errors raised by the geometry, flow, shooting and verification layers.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum PmpError {
    #[error("projection onto the manifold did not converge after {iterations} iterations (|g| = {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("constraint Jacobian is rank deficient (smallest/largest singular value = {ratio:e})")]
    RankDeficient { ratio: f64 },

    #[error("control {control:?} lies outside the control set")]
    ControlOutOfSet { control: Vec<f64> },

    #[error("trajectory left the trusted tube at t = {t} (tube distance {distance:e})")]
    LeftTube { t: f64, distance: f64 },

    #[error("step-halving error estimate {estimate:e} exceeds tolerance at t = {t}")]
    StepTooLarge { t: f64, estimate: f64 },

    #[error("transported tangent frame degenerated at t = {t} (defect {defect:e})")]
    FrameSingularity { t: f64, defect: f64 },

    #[error("flow failed: {0}")]
    FlowFailure(Box<PmpError>),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("no extremal found after {starts} starts")]
    NoExtremalFound { starts: usize },

    #[error("extremal grid mismatch: {0}")]
    GridMismatch(String),

    #[error("state at grid index {index} is off the manifold (|g| = {residual:e})")]
    OffManifold { index: usize, residual: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

impl PmpError {
    pub(crate) fn flow(err: PmpError) -> PmpError {
        match err {
            PmpError::FlowFailure(_) => err,
            other => PmpError::FlowFailure(Box::new(other)),
        }
    }
}

pub type Result<T> = std::result::Result<T, PmpError>;

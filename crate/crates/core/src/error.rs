use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid metric at {location}: {reason}")]
    InvalidMetric { location: String, reason: String },

    #[error("degenerate metric at {location}: {reason}")]
    DegenerateMetric { location: String, reason: String },

    #[error("fixed-point iteration did not converge after {iterations} steps (last residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("gradient failed at {} grid point(s), first at {:?}", points.len(), points.first())]
    Gradient { points: Vec<(usize, usize)> },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("degenerate flag: pole and transverse vector are parallel")]
    DegenerateFlag,

    #[error("CD condition violated at x = {x:?}, y = {y:?}: weighted Ricci curvature is -inf")]
    CdViolated { x: [f64; 2], y: [f64; 2] },

    #[error("flow degenerated at t = {time}: {reason}")]
    FlowDegeneration { time: f64, reason: String },

    #[error("positivity lost at t = {time} (min u = {min})")]
    PositivityLoss { time: f64, min: f64 },

    #[error("CFL violated: dt = {dt} exceeds the stability limit {limit}")]
    Cfl { dt: f64, limit: f64 },

    #[error("run stopped at step {step} (t = {time}): {reason}")]
    Stopped { step: usize, time: f64, reason: String },

    #[error("geodesic integration failed: {reason} (last state x = {x:?}, v = {v:?})")]
    Integration { reason: String, x: [f64; 2], v: [f64; 2] },

    #[error("inputs inconsistent with trajectory: {0}")]
    Inconsistent(String),

    #[error("expression error: {0}")]
    Expr(String),

    #[error("invalid scenario:\n  {}", .0.join("\n  "))]
    Scenario(Vec<String>),

    #[error("io error: {0}")]
    Io(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors raised across the laboratory.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("point outside spatial domain: coordinate {axis} = {value} not in [{lo}, {hi}]")]
    Domain { axis: usize, value: f64, lo: f64, hi: f64 },

    #[error("action outside action set: component {axis} = {value} not in [{lo}, {hi}]")]
    Action { axis: usize, value: f64, lo: f64, hi: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("assumption failure: {0}")]
    Assumption(String),

    #[error(
        "linear solve did not converge at time node {time_index}: residual {residual:e} after {iterations} iterations"
    )]
    Solver {
        time_index: usize,
        residual: f64,
        iterations: usize,
    },

    #[error("fixed-point iteration {iteration} failed: {source}")]
    FixedPoint {
        iteration: usize,
        #[source]
        source: Box<LabError>,
    },

    #[error("missing state: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

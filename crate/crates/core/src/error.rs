use thiserror::Error;

/// Errors produced by the solvers, analysis routines and file readers.
#[derive(Debug, Error)]
pub enum Error {
    /// Parameters violate a model precondition.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Ill-conditioned or otherwise failed numerical computation.
    #[error("numerical failure: {0}")]
    Numeric(String),

    /// Calibration target not reachable on the evaluated curve.
    #[error("target power {target} outside achievable range [{lo}, {hi}]")]
    Range {
        target: f64,
        lo: f64,
        hi: f64,
        /// `(gamma, power)` points that were evaluated.
        curve: Vec<(f64, f64)>,
    },

    /// Joint state space larger than the configured cap.
    #[error("joint state space has {states} states, above the cap of {cap}")]
    StateCap { states: u128, cap: usize },

    /// Malformed input file.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("linear system (I - aY)^T is singular")]
    Singular,

    #[error("power iteration did not converge after {iterations} iterations (last change {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("row polytope is empty: {available} admissible columns with cap {cap} cannot reach sum 1")]
    EmptyRowPolytope { available: usize, cap: f64 },

    #[error("row {row} cannot meet quality {required}: at most {max_quality} is achievable")]
    InfeasibleRow {
        row: usize,
        max_quality: f64,
        required: f64,
    },

    #[error("recommendation list infeasible: {0}")]
    InfeasibleMarginals(String),

    #[error("quadratic program: {0}")]
    Qp(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    IoBare(#[from] std::io::Error),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

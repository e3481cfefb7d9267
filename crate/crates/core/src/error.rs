use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty cohort")]
    EmptyCohort,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    /// A per-patient data problem, located by patient id and file position.
    #[error("patient {patient}: {message}")]
    Patient { patient: String, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Config validation failure with the offending field path.
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("window too short: {window} timepoints per view, need at least {min}")]
    WindowTooShort { window: usize, min: usize },

    #[error("ROI {roi} has zero variance")]
    ConstantColumn { roi: usize },

    #[error("shrunk covariance is numerically singular (condition {condition:e}); increase shrinkage")]
    SingularCovariance { condition: f64 },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("loss must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("power iteration did not converge in {0} iterations")]
    NoConvergence(usize),

    #[error("zero-norm {0}")]
    ZeroNorm(String),

    #[error("node {0} has no outgoing edges")]
    IsolatedNode(usize),

    #[error("split infeasible: {0}")]
    Split(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad user-supplied configuration or inputs
    /// rather than by a failure while running a stage.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

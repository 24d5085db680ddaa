use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the simulator and the spectral toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix of {requested} entries exceeds the size cap of {limit} entries")]
    SizeCap { requested: u128, limit: usize },

    #[error("matrix is not symmetric (relative asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite (smallest eigenvalue {0})")]
    NotPositiveDefinite(f64),

    #[error(
        "eigensolver did not converge after {iterations} matrix-vector products \
         (estimate {estimate}, residual {residual:e})"
    )]
    NoConvergence {
        iterations: usize,
        estimate: f64,
        residual: f64,
        last_iterate: Vec<f64>,
    },

    #[error("non-finite iterate after local step {step}")]
    NonFinite { step: usize },

    #[error(
        "training diverged at round {round} on node {node} with step size {eta}; \
         try a smaller step size"
    )]
    Divergence { round: usize, node: usize, eta: f64 },

    #[error("could not build a {degree}-regular graph on {nodes} nodes after {attempts} attempts (seed stream {seed_info})")]
    TopologyRetries {
        nodes: usize,
        degree: usize,
        attempts: usize,
        seed_info: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error on {path}: {message}")]
    Csv { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Csv {
            path: path.into(),
            message: err.to_string(),
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The variants are grouped so that a front-end can map them onto distinct
/// exit statuses: configuration problems, numerical failures and I/O.
#[derive(Debug, Error)]
pub enum RnfError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("forward trace is stale: recorded at parameter version {trace}, network is at {network}")]
    StaleTrace { trace: u64, network: u64 },

    #[error("decomposition failed: {0}")]
    Decomposition(String),

    #[error("power iteration did not converge after {iterations} iterations (last relative change {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("training diverged at step {step}: loss {loss:.3e}")]
    Divergence { step: u64, loss: f64 },

    #[error("kernel of {rows}x{cols} entries exceeds the configured cap of {cap}")]
    MemoryGuard { rows: usize, cols: usize, cap: usize },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("malformed data in {path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl RnfError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RnfError::Io { path: path.into(), source }
    }

    /// Broad category used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            RnfError::Config(_) | RnfError::Shape(_) | RnfError::StaleTrace { .. } | RnfError::Serde(_) => {
                ErrorKind::Config
            }
            RnfError::Decomposition(_)
            | RnfError::NoConvergence { .. }
            | RnfError::Divergence { .. }
            | RnfError::MemoryGuard { .. }
            | RnfError::Numeric(_) => ErrorKind::Numeric,
            RnfError::Data { .. } | RnfError::Io { .. } | RnfError::Csv(_) => ErrorKind::Io,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Numeric,
    Io,
}

pub type Result<T, E = RnfError> = std::result::Result<T, E>;

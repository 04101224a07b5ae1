use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("step index must be at least 1")]
    ZeroStep,

    #[error("out-of-order accumulator update: expected step {expected}, got {got}")]
    OutOfOrder { expected: u64, got: u64 },

    #[error("iterate diverged at step {step} (|beta| exceeded {limit:e}); lower gamma0")]
    Diverged { step: u64, limit: f64 },

    #[error("insufficient observations for inference: n = {n}, need at least {required}")]
    InsufficientObservations { n: u64, required: u64 },

    #[error("degenerate scaling: {0}")]
    DegenerateScaling(String),

    #[error("singular scaling matrix: {0}")]
    Singular(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("critical value unavailable for level {level}, ell {ell}: {reason}")]
    CriticalValueUnavailable { level: f64, ell: usize, reason: String },

    #[error("column {0:?} not found in header")]
    MissingColumn(String),

    #[error("parse error at row {row}, column {column:?}: {message}")]
    Parse {
        row: u64,
        column: String,
        message: String,
    },

    #[error("ragged row {row}: expected {expected} fields, found {found}")]
    RaggedRow {
        row: u64,
        expected: usize,
        found: usize,
    },

    #[error("{path}: file changed since it was indexed ({detail})")]
    IndexMismatch { path: PathBuf, detail: String },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse error classes used for exit codes and machine-readable reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Parse,
    Io,
    Insufficient,
    Degenerate,
    Diverged,
    Singular,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Usage => "usage",
            ErrorCategory::Parse => "parse",
            ErrorCategory::Io => "io",
            ErrorCategory::Insufficient => "insufficient",
            ErrorCategory::Degenerate => "degenerate",
            ErrorCategory::Diverged => "diverged",
            ErrorCategory::Singular => "singular",
        }
    }

    /// 2 usage, 3 data, 4 numerical.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Usage => 2,
            ErrorCategory::Parse | ErrorCategory::Io | ErrorCategory::Insufficient => 3,
            ErrorCategory::Degenerate | ErrorCategory::Diverged | ErrorCategory::Singular => 4,
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidConfig(_)
            | Error::DimensionMismatch { .. }
            | Error::ZeroStep
            | Error::OutOfOrder { .. }
            | Error::CriticalValueUnavailable { .. } => ErrorCategory::Usage,
            Error::MissingColumn(_)
            | Error::Parse { .. }
            | Error::RaggedRow { .. }
            | Error::NonFinite(_)
            | Error::Csv(_) => ErrorCategory::Parse,
            Error::Io(_) | Error::IndexMismatch { .. } => ErrorCategory::Io,
            Error::InsufficientObservations { .. } => ErrorCategory::Insufficient,
            Error::DegenerateScaling(_) => ErrorCategory::Degenerate,
            Error::Diverged { .. } => ErrorCategory::Diverged,
            Error::Singular(_) => ErrorCategory::Singular,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("horizon {horizon} exceeds the enumeration guard of {guard}")]
    EnumerationGuard { horizon: usize, guard: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("task {0} is missing boundary profiling runs")]
    MissingBoundaryRuns(u64),

    #[error("duplicate task id {0}")]
    DuplicateTask(u64),

    #[error("dataset is empty after filtering")]
    EmptyDataset,

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("count overflow: T={t} exceeds the exact-arithmetic guard of 62")]
    CountOverflow { t: usize },

    #[error("missing prerequisite {what} at {path}")]
    MissingInput { what: &'static str, path: PathBuf },

    #[error("malformed {what}: {detail}")]
    Parse { what: &'static str, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable, machine-parsable class name used by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::EnumerationGuard { .. } => "enumeration_guard",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::MissingBoundaryRuns(_) => "missing_boundary_runs",
            Error::DuplicateTask(_) => "duplicate_task",
            Error::EmptyDataset => "empty_dataset",
            Error::Divergence(_) => "divergence",
            Error::CountOverflow { .. } => "count_overflow",
            Error::MissingInput { .. } => "missing_input",
            Error::Parse { .. } => "parse_error",
            Error::Io { .. } => "io_error",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("id {id} out of range (valid ids are 0..={max})")]
    IdOutOfRange { id: usize, max: usize },

    #[error("cannot sample {requested} negatives: only {eligible} eligible items")]
    InfeasibleSampling { requested: usize, eligible: usize },

    #[error("attention weights: column {column} sums to {sum} (expected 1)")]
    WeightColumn { column: usize, sum: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("eval protocol mismatch: {0}")]
    Protocol(String),

    #[error("output directory {0} already exists (use --force to overwrite)")]
    OutputExists(PathBuf),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::ConfigParse(_)
                | Error::OutputExists(_)
                | Error::Invalid(_)
                | Error::Empty(_)
                | Error::Protocol(_)
        )
    }
}

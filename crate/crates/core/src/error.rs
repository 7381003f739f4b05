use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every layer of the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed file: bad magic, truncated header, garbage payload.
    #[error("format error: {0}")]
    Format(String),

    /// Input violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Numerical failure (non-finite accumulation, failed factorization).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A file format version this build does not understand.
    #[error("unsupported version {found} in {what} (this build reads version {expected})")]
    UnsupportedVersion {
        what: String,
        found: u32,
        expected: u32,
    },

    /// No allocation satisfies the budget constraint.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// I/O failure, carrying the path that produced it.
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Failure tagged with the pipeline stage that raised it.
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

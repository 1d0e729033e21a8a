//! Crate-wide error type and result alias.

use std::path::Path;

/// Errors produced anywhere in the pipeline.
///
/// The variant determines the CLI exit code: anything caused by bad inputs
/// (shapes, config keys, malformed corpora, missing files named by the user)
/// exits with 2, unexpected internal failures exit with 1.
#[derive(Debug, thiserror::Error)]
pub enum SrwError {
    /// An operation received inputs that violate its contract.
    #[error("validation: {0}")]
    Validation(String),
    /// A configuration value or key is invalid.
    #[error("config: {0}")]
    Config(String),
    /// An operation was called in a state it cannot serve yet.
    #[error("state: {0}")]
    State(String),
    /// A corpus or file on disk is malformed or missing.
    #[error("data: {0}")]
    Data(String),
    /// Synthetic generation could not satisfy its constraints.
    #[error("generation: {0}")]
    Generation(String),
    /// A checkpoint could not be written or parsed.
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    /// Training or evaluation produced non-finite numbers.
    #[error("numeric: {0}")]
    Numeric(String),
    /// Underlying I/O failure.
    #[error("io: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl SrwError {
    /// Wraps an I/O error with the path or action that triggered it.
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        SrwError::Io { context: context.into(), source }
    }

    /// I/O wrapper naming a path.
    pub fn io_at(path: &Path, source: std::io::Error) -> Self {
        SrwError::Io { context: path.display().to_string(), source }
    }

    /// Process exit code this error maps to (see module docs).
    pub fn exit_code(&self) -> i32 {
        match self {
            SrwError::Validation(_)
            | SrwError::Config(_)
            | SrwError::State(_)
            | SrwError::Data(_) => 2,
            SrwError::Generation(_)
            | SrwError::Checkpoint(_)
            | SrwError::Numeric(_)
            | SrwError::Io { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, SrwError>;

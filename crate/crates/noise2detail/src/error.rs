//! Error type shared by the whole crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor ops, samplers, training, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two operands (or an operand and an operator) disagree on shape.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A scalar argument or configuration value is out of range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("non-finite {what} at iteration {iteration}: {details}")]
    NonFinite {
        what: &'static str,
        iteration: usize,
        details: String,
    },

    /// A pipeline stage failed; the label tells which one.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    /// Image file could not be read, decoded, or written.
    #[error("image file {path:?}: {message}")]
    ImageFile { path: PathBuf, message: String },

    /// Checkpoint file is missing, truncated, or has a bad magic/version.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wrap an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Which stage failed, if this is a stage-labeled error.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

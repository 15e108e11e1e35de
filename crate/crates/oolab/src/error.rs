//! Error type shared across the crate.

use thiserror::Error;

/// Errors surfaced by the lab.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes fed to a tensor primitive.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A precondition on caller-supplied values failed.
    #[error("invalid argument: {0}")]
    Validation(String),

    /// An operation produced NaN or infinity.
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    /// Numeric failure while iterating an attack; names the offending step.
    #[error("attack step {step}: {source}")]
    AttackNumeric {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    /// An internal invariant was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A serialized artifact could not be decoded; offset is in bytes.
    #[error("malformed file at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// Training loss became non-finite.
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    /// A pipeline stage failed; wraps the underlying cause.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn validation(detail: impl Into<String>) -> Self {
        Error::Validation(detail.into())
    }

    pub(crate) fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

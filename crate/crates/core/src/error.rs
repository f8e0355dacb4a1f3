use alloc::string::String;
use alloc::vec::Vec;

use crate::sample::Stance;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("shape mismatch in {op}: expected {expected:?}, found {found:?}")]
    Shape {
        op: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("rationale generation failed for stance {stance} after {attempts} attempt(s): {message}")]
    Generation {
        stance: Stance,
        attempts: u32,
        message: String,
    },

    #[error("invalid record {record_id}: field `{field}`: {message}")]
    Validation {
        record_id: String,
        field: &'static str,
        message: String,
    },

    #[error("checkpoint load failed: mismatched tensors {0:?}")]
    CheckpointMismatch(Vec<String>),

    #[error("invalid config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Short machine-parsable code, used by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::RejectedInput(_) => "E_REJECTED_INPUT",
            Error::Shape { .. } => "E_SHAPE",
            Error::Contract(_) => "E_CONTRACT",
            Error::Generation { .. } => "E_GENERATION",
            Error::Validation { .. } => "E_VALIDATION",
            Error::CheckpointMismatch(_) => "E_CHECKPOINT_MISMATCH",
            Error::Config(_) => "E_CONFIG",
        }
    }
}

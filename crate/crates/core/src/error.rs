use thiserror::Error;

use crate::objectives::LossBreakdown;

/// Errors raised by the library. Variants map onto the failure classes the
/// CLI turns into exit codes (configuration, I/O, numeric).
#[derive(Debug, Error)]
pub enum UrkleError {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid label {label} (expected < {num_classes})")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("non-finite gradient at PGD step {step}")]
    NonFiniteGradient { step: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite loss at training step {step}: {breakdown:?}")]
    NumericAbort { step: usize, breakdown: LossBreakdown },

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported checkpoint format version {found} (this build reads {expected})")]
    Version { found: u32, expected: u32 },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl UrkleError {
    /// True for failures caused by arithmetic (non-finite values), as opposed
    /// to bad configuration or bad files.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            UrkleError::NonFiniteGradient { .. }
                | UrkleError::Numeric(_)
                | UrkleError::NumericAbort { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, UrkleError>;

pub(crate) fn contract(msg: impl Into<String>) -> UrkleError {
    UrkleError::Contract(msg.into())
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LprError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LprError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("gradient oracle failed: {0}")]
    Oracle(String),

    #[error("undefined input: {0}")]
    UndefinedInput(String),

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },
}

impl LprError {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        LprError::Shape { op, left, right }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        LprError::Param(msg.into())
    }
}

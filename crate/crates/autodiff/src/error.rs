use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("backward: loss must hold exactly one element, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}: variables belong to different tapes")]
    ForeignTape(&'static str),
    #[error("{context}: non-finite value encountered")]
    NonFinite { context: String },
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, AdError>;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A precondition of an operation was not met by the caller.
    #[error("{op}: contract violation: {msg}")]
    Contract { op: &'static str, msg: String },

    /// log of a non-positive value or division by zero.
    #[error("{op}: domain error: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, DiffError>;

pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> DiffError {
    DiffError::Contract {
        op,
        msg: msg.into(),
    }
}

use thiserror::Error;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Clone, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: lhs shape {lhs:?}, rhs shape {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape in {op}: {msg} (shape {shape:?})")]
    BadShape {
        op: &'static str,
        msg: String,
        shape: Vec<usize>,
    },

    #[error("token id {id} out of range for vocab {vocab} at position ({row}, {col})")]
    IndexOutOfRange {
        id: u32,
        vocab: usize,
        row: usize,
        col: usize,
    },

    #[error("invalid parameter in {op}: {msg}")]
    BadParam { op: &'static str, msg: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

use thiserror::Error;

/// Errors raised while evaluating or differentiating a [`crate::Tape`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    Overflow { node: usize, op: &'static str },
    #[error("input `{0}` contains non-finite values")]
    NonFiniteInput(String),
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("unknown output `{0}`")]
    UnknownOutput(String),
    #[error("output `{name}` is not scalar (shape {shape:?})")]
    NonScalarOutput { name: String, shape: Vec<usize> },
    #[error("row index {index} out of range for a table with {rows} rows at node {node}")]
    IndexOutOfRange { node: usize, index: usize, rows: usize },
    #[error("matrix is not positive definite at node {node}")]
    NotPositiveDefinite { node: usize },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}

pub type Result<T> = std::result::Result<T, TapeError>;

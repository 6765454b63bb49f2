use thiserror::Error;

use crate::shape::Shape;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs} and {rhs}")]
    Dimension {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: {message}")]
    Shape { op: &'static str, message: String },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid input at row {row}: {message}")]
    Input { row: usize, message: String },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("optimizer state: {0}")]
    State(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

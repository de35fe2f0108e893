//! Dense tensors, the gradient tape and the finite-difference verifier.

mod gradcheck;
mod graph;
mod scalar;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, GradCheckReport};
pub use graph::{BinaryKind, Gradients, Graph, UnaryKind, Var};
pub use scalar::Scalar;
pub use tensor::{broadcast_shape, numel, strides, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("variable is not on this tape")]
    NotOnTape,
    #[error("gradient requested of non-scalar output with shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, NumError>;

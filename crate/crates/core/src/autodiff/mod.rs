//! Minimal dense reverse-mode automatic differentiation.
//!
//! Values live on a [`Tape`] in evaluation order and are addressed through
//! [`Var`] handles. The op set is the closure of what the two regressors need:
//! matrix products, element-wise arithmetic, activations, last-axis softmax,
//! layer normalization, dropout, row gather/scatter and a few reshaping ops.
//! Broadcasting is limited to adding a vector to every row of a matrix.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckError, GradCheckReport};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("data of length {len} does not fit shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: invalid axis {axis}")]
    Axis { op: &'static str, axis: usize },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("dropout probability {0} outside [0, 1)")]
    DropoutProbability(f64),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

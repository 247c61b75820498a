//! Dense tensors, the attention/normalization kernels the model needs, and a
//! reverse-mode gradient tape.

mod ops;
mod tape;
mod tensor;

use thiserror::Error;

pub use ops::{gelu, gelu_scalar, layernorm, masked_softmax, matmul, LAYERNORM_EPS};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Mask, Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("ragged or empty row list")]
    Ragged,
}

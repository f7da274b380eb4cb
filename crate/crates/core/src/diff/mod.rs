//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] as they execute. Calling
//! [`Tape::backward`] on a scalar node sweeps the tape in reverse id order and
//! returns the gradient of that scalar with respect to every leaf.
//!
//! ```
//! use simo::diff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
//! let y = tape.dot(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
//! ```

mod tape;
mod tensor;

use std::fmt;

use thiserror::Error;

pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;


/// Kind of a recorded tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    AddRow,
    MatMul,
    Sum,
    Mean,
    RowSum,
    Square,
    Dot,
    Sigmoid,
    Relu,
    LayerNorm,
    ReciprocalEps,
    Scale,
    DivConst,
    GatherRows,
    SegmentMean,
    SoftmaxCrossEntropy,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Leaf => "leaf",
            OpKind::Constant => "constant",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::MatMul => "matmul",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::RowSum => "row_sum",
            OpKind::Square => "square",
            OpKind::Dot => "dot",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::ReciprocalEps => "reciprocal_eps",
            OpKind::Scale => "scale",
            OpKind::DivConst => "div_const",
            OpKind::GatherRows => "gather_rows",
            OpKind::SegmentMean => "segment_mean",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: OpKind,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a rank-{expected} input, got shape {shape:?}")]
    Rank {
        op: OpKind,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: OpKind, reason: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("data of length {len} does not fit shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
}

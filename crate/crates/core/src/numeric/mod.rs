//! Dense `f64` tensors, a reverse-mode tape, two-layer MLPs and AdamW.

mod mlp;
mod optim;
mod params;
mod tape;
mod tensor;

pub use mlp::{mlp2_forward, Activation, Mlp2};
pub use optim::{AdamW, AdamWConfig, OptimizerState};
pub use params::{uniform_fan_in, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul, sigmoid, sigmoid_scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("shape {shape:?} does not hold {len} values")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    RaggedRows,
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a matrix, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("backward called twice on the same tape")]
    BackwardTwice,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("gradient for `{name}` has shape {grad:?}, parameter has {param:?}")]
    GradientShape {
        name: String,
        grad: Vec<usize>,
        param: Vec<usize>,
    },
}

//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! [`Tensor`] holds values and the forward kernels. [`Graph`] records each
//! kernel application as a node and replays the chain rule in reverse
//! creation order. Broadcasting is limited to repeating a tensor under new
//! leading axes; everything else is reshaped explicitly.

mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape {shape:?} has a zero extent")]
    EmptyExtent { shape: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("slice {start}..{} out of range for axis {axis} of extent {extent}", start + len)]
    SliceBounds {
        axis: usize,
        start: usize,
        len: usize,
        extent: usize,
    },
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("{op} of a negative input")]
    Domain { op: &'static str },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("node {node} depends on itself or a later node")]
    Cycle { node: usize },
    #[error("unknown graph node {id}")]
    UnknownVar { id: usize },
}

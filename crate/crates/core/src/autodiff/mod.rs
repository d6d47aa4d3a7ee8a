//! A small reverse-mode automatic differentiation engine.
//!
//! [`Graph`] is a tape: every op appends a node holding its output value and,
//! when any input requires a gradient, the information its backward rule
//! needs. [`Graph::backward`] walks the tape once in reverse. Broadcasting is
//! limited to [`Graph::add_bias`]; every other shape mismatch is an error.

mod graph;
mod params;
mod real;
mod tensor;

pub use graph::{Graph, Var};
pub use params::{
    decode_params, encode_params, NamedParam, ParamEntry, ParamError, ParamIndex, ParamSet,
};
pub use real::Real;
pub use tensor::Tensor;

/// Default epsilon of [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
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
    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("{op}: range {start}..{} exceeds dimension {dim}", start + len)]
    OutOfBounds {
        op: &'static str,
        start: usize,
        len: usize,
        dim: usize,
    },
    #[error("{op}: no inputs")]
    Empty { op: &'static str },
    #[error("backward needs a one-element loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

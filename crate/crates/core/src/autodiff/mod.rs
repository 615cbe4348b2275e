//! Minimal reverse-mode differentiation over dense rank-4 tensors.

mod graph;
mod kernels;
mod tensor;

pub use graph::{BackwardRule, Gradients, Graph, NodeId, ParamNodes};
pub use tensor::{ParamVector, Segment, Tensor4};

//! Minimal reverse-mode automatic differentiation for 3D convolutional nets.
//!
//! Backward rules are expressed as graph ops, which gives higher-order
//! derivatives for free (double backward through a network).

pub mod conv;
mod graph;
mod real;
mod tensor;

pub use conv::ConvGeometry;
pub use graph::{Graph, NodeId};
pub use real::Real;
pub use tensor::Tensor;

//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are flat row-major buffers with a shape. Differentiable programs
//! are recorded on a [`Graph`] (a Wengert tape): forward builders append one
//! node per operation, [`Graph::backward`] replays the tape in reverse and
//! accumulates gradients additively across fan-out. The op set is exactly
//! what a small transformer with depth-wise softmax aggregation needs; there
//! is no broadcasting beyond row vectors against matrices.

mod check;
mod graph;
mod real;
mod tensor;

pub use check::grad_check;
pub use graph::{Graph, TensorId};
pub use real::Real;
pub use tensor::Tensor;

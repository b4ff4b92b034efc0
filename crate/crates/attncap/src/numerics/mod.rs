//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! All values are 64-bit; gradient checks against finite differences are
//! only meaningful at that precision. The primitive set is exactly what
//! the transformer forward pass needs, nothing more.

mod grad_check;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use grad_check::{finite_difference_gradient, max_relative_error};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;

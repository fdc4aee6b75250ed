//! Dense tensors and a small reverse-mode differentiation engine.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, relative_error, RELATIVE_ERROR_FLOOR};
pub(crate) use graph::reflect_index;
pub use graph::{BatchNormState, Gradients, Graph, NormMode, Padding, Var};
pub use tensor::{Element, Tensor};

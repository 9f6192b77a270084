//! Dense tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod graph;
mod kernels;

pub use gradcheck::{compare_gradient, grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{BackwardFault, Graph, OpKind, Var};

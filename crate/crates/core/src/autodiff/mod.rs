//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)s.

mod graph;
mod gradcheck;

pub use gradcheck::{grad_check, grad_check_params, weighted_sum, GradCheckReport, DEFAULT_EPS, RELATIVE_ERROR_FLOOR};
pub use graph::{Graph, Var};

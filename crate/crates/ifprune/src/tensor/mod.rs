//! f64 tensor arena with reverse-mode autodiff.

pub mod gradcheck;
mod graph;
pub mod linalg;

pub use gradcheck::{grad_check, CheckParam, GradCheckReport};
pub use graph::{Graph, Tensor, Var};

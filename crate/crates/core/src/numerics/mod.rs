//! Tensor substrate, reverse-mode tape and numerical oracles.

pub mod check;
mod graph;
pub mod kernels;
pub mod linalg;
mod param;
mod real;
mod tensor;

pub use check::{
    compare_grads, dense_jacobian_logdet, finite_diff_grad, GradComparison, JacobianReport,
};
pub use graph::{Function, Graph, Var};
pub use param::{Param, ParamId};
pub use real::Real;
pub use tensor::{Shape, Tensor};

//! Reverse-mode differentiation over the handful of operations the regressor
//! and its losses need.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{numeric_gradient, relative_error, GradCheckReport, GradChecker, TensorCheck, REL_ERROR_FLOOR};
pub use graph::{Graph, NodeId, OpKind};
pub use kernels::{log_sigmoid, sigmoid, smooth_l1, smooth_l1_grad, softplus};
pub use tensor::{Tensor, MAX_RANK};

#[cfg(test)]
mod tests;

//! Minimal reverse-mode differentiable tensor core.
//!
//! Only the operations needed by the identifier network and its losses are
//! provided. Values are computed eagerly when an op is recorded on a
//! [`Graph`]; [`Graph::backward`] walks the tape in reverse once.

mod adam;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{BatchStats, Conv1dSpec, Gradients, Graph, Var, BN_EPS, CE_CLAMP};
pub use tensor::Tensor;

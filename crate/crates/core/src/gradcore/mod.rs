//! Differentiable numerics: tensors, layer kernels, reverse-mode gradients,
//! Adam, and finite-difference checking.

mod adam;
mod fdcheck;
mod graph;
pub mod kernels;
pub mod linalg;
mod params;
mod real;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use fdcheck::{fd_check, FdCheck, FdEntry, FdReport};
pub use graph::{ContrastivePlan, Gradients, Graph, Var};
pub(crate) use graph::kl_sum;
pub use kernels::{conv1d_out_len, conv_transpose_out_len};
pub use params::{ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;

//! Dense `f64` tensors, a reverse-mode tape, finite-difference checking and Adam.

mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_store, GradCheckReport};
pub use params::{glorot_uniform, Adam, AdamConfig, Param, ParamGroup, ParamId, ParamStore};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;

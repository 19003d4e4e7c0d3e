//! Dense-tensor reverse-mode differentiation.

pub mod checkpoint;
pub mod gradcheck;
mod kernels;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_scaled, GradCheck};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Only the primitives the point-cloud model needs are provided. Every
//! primitive checks its output for NaN/infinity and fails with
//! [`Error::NonFinite`](crate::Error::NonFinite) instead of propagating it.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamReport};
pub use tape::{
    set_arccos_backward_fault, Gradients, Tape, Var, ARCCOS_CLAMP, BACKWARD_EPS, LAYER_NORM_EPS,
};
pub use tensor::Tensor;

//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{InputGrads, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{log_softmax_row, softmax_row};

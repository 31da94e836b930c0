//! Reverse-mode differentiation over dense `f64` tensors, including
//! gradients of gradients.

mod check;
mod tape;
mod tensor;

pub use check::{
    finite_diff_check, hessian_vector_check, relative_error, GradCheckReport, RELATIVE_ERROR_GUARD,
};
pub use tape::{NodeId, Tape, Var, LOG_FLOOR};
pub use tensor::Tensor;

//! Dense tensors with define-by-run reverse-mode differentiation.

mod check;
mod param;
mod tape;
mod value;

pub use check::{finite_difference_check, param_gradient_check, relative_error, REL_EPS};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{concat, linear_recurrence, Gradients, Tape, Var};
pub use value::Tensor;

#[allow(unused_imports)]
pub(crate) use tape::{argmax, matmul_raw};

//! Dense tensors, a reverse-mode tape, AdamW and gradient checking.

mod adamw;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adamw::{adamw_step, adamw_update, AdamWConfig, AdamWState, Moments};
pub use gradcheck::{analytic_grads, grad_check, GRAD_CHECK_EPS};
pub use params::{Bound, Param, ParamStore};
pub use tape::{log_sigmoid, sigmoid, softplus, Precision, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

//! Dense tensors, parameters and a reverse-mode tape.

mod checkpoint;
pub mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use checkpoint::{read_params, write_params};
pub use gradcheck::{grad_check, rel_err, GradCheckReport, REL_ERR_FLOOR};
pub use param::{glorot_bound, init_tensor, Gradients, Init, ParamId, ParamStore, Parameter};
pub use tape::{sigmoid, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `m + ln Σ exp(x - m)` with `m = max(x)`.
pub fn logsumexp<T: Scalar>(xs: &[T]) -> Result<T> {
    if xs.is_empty() {
        return Err(Error::invalid("logsumexp of an empty vector"));
    }
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return Ok(m);
    }
    let s: T = xs.iter().map(|&x| (x - m).exp()).sum();
    Ok(m + s.ln())
}

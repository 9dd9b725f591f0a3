//! Reverse-mode differentiation over dense `f64` tensors.

mod check;
mod tape;
mod tensor;

pub use check::{finite_diff_check, FiniteDiffReport, ABS_FALLBACK, SMALL_GRADIENT};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{NamedParams, Tensor};

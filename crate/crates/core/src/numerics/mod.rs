//! Minimal dense-tensor math with reverse-mode differentiation.
//!
//! `f32` is the working precision for training and inference; the same code
//! instantiates at `f64` for gradient checking.

mod check;
mod ops;
mod tensor;
mod var;

pub use check::grad_check;
pub use ops::reflect_index;
pub use tensor::{Parameter, Real, Tensor};
pub use var::Var;

#[allow(unused_imports)]
pub(crate) use ops::{gauss_cdf, matmul_raw, softmax_rows_raw};

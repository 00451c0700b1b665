//! Deterministic numeric kernel shared by every other module.

mod gradcheck;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_grad, relative_error, DEFAULT_STEP};
pub use rng::{gaussian, RngStream};
pub use tensor::{matmul, softmax_rows, Tensor};

//! Minimal dense linear algebra and reverse-mode differentiation.

mod matrix;
mod tape;

pub use matrix::{gemm_into, matmul, Matrix};
pub use tape::{softmax_rows, Gradients, Tape, Var};

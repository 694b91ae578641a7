//! Dense tensors, a reverse-mode tape, and the Adam optimizer.

mod adam;
mod kernels;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use kernels::gemm_nn;

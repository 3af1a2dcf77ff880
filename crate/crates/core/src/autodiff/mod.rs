//! Minimal dense reverse-mode automatic differentiation.

mod init;
mod optim;
mod tape;
mod tensor;

pub use init::{constant_init, orthogonal_init};
pub use optim::{adam_step, clip_grad_norm, global_norm, AdamState, Param};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

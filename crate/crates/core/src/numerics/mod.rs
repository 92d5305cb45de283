//! Tensors, attention masks, reverse-mode autodiff and seeded randomness.

mod mask;
mod rng;
mod tape;
mod tensor;

pub use mask::AttentionMask;
pub use rng::Rng;
pub use tape::{log_softmax_slice, softmax_slice, Gradients, Tape, Var};
pub use tensor::Tensor;

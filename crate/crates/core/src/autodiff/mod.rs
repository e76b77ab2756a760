//! Dense `f64` tensors and a reverse-mode gradient tape.

mod tape;
mod tensor;

pub use tape::{AttentionLayout, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

//! Dense tensors, reverse-mode differentiation, AdamW and gamma-family
//! special functions.

mod optim;
pub mod special;
mod tape;
mod tensor;

pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use special::{digamma, lgamma, trigamma};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

//! Dense tensors, reverse-mode differentiation, layers and the optimizer.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use layers::Mode;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

//! Reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape. Trainable values enter it through [`Graph::leaf`];
//! everything else is a constant. In [`Mode::Inference`] the same op calls
//! just compute values, record nothing, and save nothing, which is what the
//! memory-bounded feature pass relies on.

mod gradcheck;
mod graph;
mod meter;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Mode, LAYERNORM_EPS};
pub use meter::MemMeter;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

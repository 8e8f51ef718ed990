//! Prompt-tuned multiple-instance learning.
//!
//! A frozen ViT-style patch encoder reads every instance of a bag together
//! with a handful of trainable prompt tokens; the class token of each
//! instance becomes a row of the bag's feature matrix, which an MIL head
//! turns into a bag prediction. Training runs in three steps so that only a
//! batch of instances is ever held in the autodiff graph:
//!
//! 1. features for all instances, batch by batch, without recording;
//! 2. loss and head update on the detached feature matrix, keeping the
//!    gradient of the loss with respect to that matrix;
//! 3. a recorded re-run of each batch, seeded with its rows of the kept
//!    gradient, accumulating the prompt gradient.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod exec;
pub mod harness;
pub mod mil;
pub mod params;
pub mod scalar;
pub mod synth;
pub mod trainer;
pub mod vit;

pub use autodiff::{Gradients, Graph, MemMeter, Mode, Tensor};
pub use error::{Error, Result};
pub use exec::Exec;
pub use scalar::Scalar;

//! Desk-scale transformer compression toolkit.
//!
//! Trains small decoder-only models from scratch, scores the importance of
//! their embedding channels, feed-forward neurons, and attention heads from
//! calibration activations, prunes widths while keeping grouped-query
//! attention aligned, stacks layers to deepen models, and recovers quality by
//! distilling against a frozen teacher's logits. Everything runs in 32-bit
//! floats with bit-reproducible results in single-threaded mode.

pub mod error;
pub mod evalkit;
pub mod importance;
pub mod model;
pub mod pruner;
pub mod store;
pub mod tensor;
pub mod trainer;
pub mod upscaler;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{KanacError, Result};

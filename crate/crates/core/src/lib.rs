//! Channel-independence (CI) filter pruning.
//!
//! The CI of a channel is the drop in nuclear norm of a layer's matricized
//! feature maps when that channel's row is removed. Channels with low CI are
//! close to linear combinations of the others and are the first candidates
//! for removal.
//!
//! Module map:
//!
//! - [`tensor_io`]: NPY activation dumps, manifests, matricization.
//! - [`ci`]: nuclear norms, single/combined CI, rank change, brute-force subset oracle.
//! - [`scoring`]: per-layer score averaging, κ-selection of masks, batch stability.
//! - [`accounting`]: architecture descriptors, κ/ratio schedules, params/FLOPs.
//! - [`desknet`]: a small trainable CNN for generating activations and
//!   running score → prune → fine-tune comparisons.

pub mod accounting;
pub mod ci;
pub mod desknet;
pub mod error;
mod linalg;
pub mod scoring;
pub mod tensor_io;

pub use error::{Error, Result};

/// Seed used by the command-line tools and reference runs when none is given.
pub const DEFAULT_SEED: u64 = 2024;

//! Mutual-channel loss for fine-grained classification, end to end and
//! CPU-only: a small reverse-mode tensor engine, the loss itself
//! (discriminality and diversity components, channel-wise attention
//! masking, cross-channel pooling), soft channel labels, a tiny trainable
//! CNN with a synthetic localized-parts dataset, and a deterministic
//! training harness with ablation and heatmap tooling.
//!
//! Entry points:
//! - [`tape::Tape`] — record ops, call `backward`, read gradients.
//! - [`loss`] — channel grouping, CWA masks, `total_loss` and friends.
//! - [`soft`] — SE-style soft channel labels and their penalties.
//! - [`model`], [`data`] — the tiny CNN and the synthetic parts dataset.
//! - [`train`] — SGD loop, schedules, metrics, run directories.
//! - [`heatmap`] — per-channel activation maps and overlap statistics.

pub mod assignment;
pub mod error;
pub mod kernels;
pub mod mask;
pub mod parallel;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

//! Core library for sequence-reducing adaptor blocks in transformer speech
//! encoders.
//!
//! What's here:
//!
//! * [`tensor`] / [`autodiff`]: a dense f64 tensor and a recording tape with
//!   reverse-mode gradients and analytical MAC counting;
//! * [`nn`] / [`redapt`] / [`encoder`]: the transformer encoder, the adaptor
//!   block that pools and restores the sequence between layers, and the
//!   feature extractor in front of both;
//! * [`cost`]: a closed-form FLOPs/memory model that mirrors the counter;
//! * [`search`]: greedy backward selection over injection positions;
//! * [`audio`]: clip synthesis and the augmentation pipeline;
//! * [`train`] / [`checkpoint`]: Adam, a toy classification task, and a
//!   binary checkpoint format.
//!
//! Everything is deterministic given a seed: parallel execution (the
//! `parallel` feature, on by default) only ever fans out over independent
//! output regions, so results are bit-identical either way.

// Validation code writes `!(x > 0.0)` rather than `x <= 0.0` on purpose:
// the negated form also rejects NaN, which is half the point of the checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod autodiff;
pub mod checkpoint;
pub mod cost;
pub mod encoder;
pub mod error;
pub mod nn;
pub mod par;
pub mod redapt;
pub mod search;
pub mod seeding;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use tensor::Tensor;

/// Version stamped into every serialised artifact (traces, reports,
/// metrics); bump on breaking layout changes.
pub const SCHEMA_VERSION: u32 = 1;

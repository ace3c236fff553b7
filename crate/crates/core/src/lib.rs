//! Analytics core for anomalous events in video: fused frame scores,
//! context-aware keyframe sampling, object tracking, relational volatility,
//! sample mining and a contrastive relation encoder, plus a seeded synthetic
//! corpus to exercise all of it.

// Range checks are written as `!(x > 0.0)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod caes;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod pipeline;
pub mod scoring;
pub mod synth;
pub mod tracking;
pub mod volatility;

pub use error::{Result, VaderError};

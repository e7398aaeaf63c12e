//! HOI-conditioned adaptive temporal encoder for weakly-supervised action
//! segmentation, trained from ordered transcripts only.
//!
//! The pipeline: per-frame hand-object interaction detections are filtered by
//! a temporal NMS and fused by a small transformer into a video-level context
//! vector; a two-branch hypernetwork turns that context (plus learned,
//! video-independent embeddings) into the classifier weights of a windowed GRU
//! encoder; frame scores are decoded against transcripts by duration-aware
//! dynamic programming, which also supplies the training losses.

pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod encoder;
pub mod eval;
pub mod gradcheck;
pub mod hoi;
pub mod hypernet;
pub mod integrator;
pub mod oracle;
pub mod tensor;
pub mod train;

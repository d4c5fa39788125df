//! Core algorithms for prompt-anchored re-identification.
//!
//! Everything in this crate is pure and `no_std` (with `alloc`): a small
//! reverse-mode autodiff tape over dense `f64` tensors, toy dual encoders
//! (ViT-style and CNN-style image encoders plus a causal text encoder),
//! the full loss zoo, identity-balanced batch sampling, a procedural
//! multi-camera benchmark renderer, the two-stage training procedures and
//! CMC/mAP retrieval evaluation. File formats, checkpoint persistence and
//! the CLI live in the companion `reid-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod augment;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod math;
pub mod params;
pub mod prompt;
pub mod sampler;
pub mod schedule;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;

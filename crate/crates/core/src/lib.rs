//! Desk-scale laboratory for iterated learning between a vision agent and a
//! language agent that communicate through a shared sparse codebook.
//!
//! The crate is organized around the training pipeline:
//!
//! * [`tensor`] / [`nn`] — minimal differentiable substrate: flat `f32`
//!   tensors, dense layers with hand-derived backward passes, AdamW, the
//!   cosine-with-rewarmup learning-rate schedule, and power-iteration
//!   spectral norms.
//! * [`world`] — synthetic compositional environment producing paired
//!   "image" (noisy patch set) and "text" (token sequence) observations.
//! * [`codebook`] — the shared limited vocabulary: max-cosine relevance,
//!   sparsemax normalization, convex pooling, usage analytics.
//! * [`agents`] — the two encoders mapping patches / tokens to
//!   codebook-pooled representations.
//! * [`training`] — contrastive, distillation and hard-negative losses plus
//!   the single train-step composition.
//! * [`iterate`] — the iterated-learning state machine: phases, spawn /
//!   freeze orchestration, full experiment execution.
//! * [`metrics`] — retrieval accuracy, topographic similarity, Lipschitz
//!   upper bounds, and the ease-of-learning probe.
//!
//! The crate is `no_std`-compatible (requires `alloc`); all IO, file formats
//! and the CLI live in the companion `iterlearn` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod agents;
pub mod codebook;
pub mod config;
pub mod error;
pub mod iterate;
pub(crate) mod math;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod world;

pub use error::{CoreError, Result};
pub use tensor::Tensor;

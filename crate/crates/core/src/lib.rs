//! Training engine for interleaved self-supervised and supervised schedules.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode gradient tape.
//! - [`nn`]: patch embedding, transformer/MLP backbone, reconstruction decoder,
//!   classification heads and mask plans.
//! - [`data`]: dataset loaders, stratified subsampling, the mixing function and
//!   batching.
//! - [`schedule`]: phase arithmetic, learning-rate schedule and AdamW.
//! - [`engine`]: the SL, SSL+SL and MixTraining trainers with pass accounting.
//! - [`metrics_io`]: checkpoints, metric logs, reports and reconstruction dumps.

pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod metrics_io;
pub mod nn;
pub mod rng;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};

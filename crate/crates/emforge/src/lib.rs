//! emforge: a desk-scale multimodal embedding training and evaluation engine.
//!
//! The crate trains a small fused image+text encoder with an
//! instruction-templated, temperature-scaled InfoNCE objective under
//! gradient-cached large-batch accumulation, and evaluates checkpoints by
//! ranking candidate pools with Precision@1. Everything is deterministic per
//! seed: reruns produce byte-identical checkpoints and reports.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fd;
pub mod gradcache;
pub mod gradcheck;
pub mod instruction;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod tensor_io;

pub use error::{Error, Result};

//! Pre-training toolkit for uni- and bidirectional LSTM acoustic models.
//!
//! The crate covers the full loop at desk scale: log-mel featurization,
//! a reverse-mode tape sufficient for LSTM stacks, predictive-coding
//! pre-training objectives (forward-only and bidirectional, plus a masked
//! baseline), transfer into supervised frame classification, a synthetic
//! benchmark corpus, and a CLI that ties the pipeline together.

mod bytes;

pub mod archive;
pub mod audit;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod guide;
pub mod net;
pub mod objectives;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

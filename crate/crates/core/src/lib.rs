//! Per-frame affect estimation from pre-extracted face embeddings.
//!
//! A transformer encoder reads fixed-length clips of frame features, some of
//! which are randomly replaced during training, and predicts valence/arousal,
//! expression class, or action units for every frame.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod feature_store;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod optimizer;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod task;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
pub use task::Task;

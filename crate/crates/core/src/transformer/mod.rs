//! Transformer encoder classifier over clip features.
//!
//! ```text
//! features -> mask -> input projection -> + positional encoding -> dropout
//!     -> [pre-LN block: LN -> MHSA -> dropout -> residual,
//!                      LN -> FFN(GELU) -> dropout -> residual] x n_layers
//!     -> per-frame linear head (tanh for VA)
//! ```
//!
//! Every parameter has a hand-written reverse-mode gradient in [`backward`].

mod config;
mod encoder;
pub mod ops;
mod params;

pub use config::ModelConfig;
pub use encoder::{backward, forward, ForwardOutput, ForwardTrace, Mode};
pub use ops::{attention, attention_weights, positional_encoding};
pub use params::{LayerParams, ModelParams, ParamView, ParamViewMut};

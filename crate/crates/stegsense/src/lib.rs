//! Detects least-significant-bit embedding in grayscale images with a
//! convolutional classifier built on a self-contained f64 autodiff stack.
//! High-pass residual filters stay on a fixed support and normalization
//! through a projection applied after every optimizer step; adaptive
//! parametric activations learn per-channel clamp thresholds from channel
//! statistics.
//!
//! Determinism contract: given a seed, every run produces bit-identical
//! metrics, checkpoints, and exports. All reductions use fixed row-major
//! accumulation orders and all randomness flows through seeded ChaCha
//! streams.

#![forbid(unsafe_code)]

pub mod error;
pub mod activations;
pub mod config;
pub mod dataset;
pub mod diagnostics;
pub mod embed;
pub mod image;
pub mod losses;
pub mod network;
pub mod pgm;
pub mod rng;
pub mod srm;
pub mod synth;
pub mod tensor;
pub mod trainer;
mod conv;
pub mod tape;
pub mod gradcheck;

pub use error::{Error, Result};
pub use tensor::Tensor;

//! Weakly-supervised pixel localization on synthetic histology-style images.
//!
//! The crate trains a small convolutional classifier from image-level labels
//! only, derives pixel pseudo-labels from its activation maps, and fine-tunes
//! a joint image/pixel model on them. Everything numeric is implemented here
//! directly on `f64` buffers: tensors, layers and their backward passes, the
//! samplers, the optimizer, and the evaluation statistics.
//!
//! Modules build on each other roughly bottom-up:
//! - [`tensor`], [`nn`], [`gradcheck`]: dense tensors, differentiable layers,
//!   finite-difference checking
//! - [`synth`], [`pnm`]: benchmark image generation and on-disk formats
//! - [`model`], [`sampling`], [`loss`], [`trainer`]: the two training stages
//! - [`stats`], [`metrics`]: evaluation and significance testing

pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sampling;
pub mod seed;
pub mod stats;
pub mod storage;
pub mod synth;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

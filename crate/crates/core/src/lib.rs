//! Failure prediction for object detectors from detector features and a world-knowledge embedding.
//!
//! A dual-encoder network aligns detector pyramid features with a
//! world-knowledge embedding; low cosine agreement flags images on which the
//! detector is likely to miss a safety-critical object. The crate also holds
//! the feature cache format, the labeling rule, the trainer, calibrated gating
//! and metrics, and the comparison scorers.

pub mod autodiff;
pub mod baselines;
mod binio;
pub mod cache;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod labeling;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type FusionModel32 = fusion::FusionModel<f32>;
pub type FusionModel64 = fusion::FusionModel<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;

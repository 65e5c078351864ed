//! Diffusion-model data augmentation for EEG seizure prediction.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! * [`numerics`]: dense arrays and reverse-mode differentiation,
//! * [`schedule`] and [`diffusion`]: the variance schedule, the noise
//!   prediction objective, training loop and ancestral sampler,
//! * [`network`]: the gated dilated-convolution noise predictor conditioned
//!   on STFT spectrograms,
//! * [`signal`]: spectrograms, normalisation and a synthetic EEG generator,
//! * [`dataset`], [`balance`], [`classifiers`] and [`evaluation`]: segment
//!   labelling, class balancing, the three classifier families and
//!   alarm-level scoring under leave-one-seizure-out cross-validation.

pub mod balance;
pub mod checkpoint;
pub mod classifiers;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod network;
pub mod numerics;
pub mod rng;
pub mod schedule;
pub mod signal;
pub mod store;

pub use error::{Error, Result};
pub use numerics::Tensor;

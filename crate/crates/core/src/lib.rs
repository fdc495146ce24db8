//! Mel-conditioned neural vocoder engine.
//!
//! The crate is organized bottom-up:
//!
//! - [`nn`]: feature maps and the numeric primitives (convolution,
//!   instance normalization, weight normalization, resampling,
//!   activations), each paired with its backward kernel.
//! - [`pqmf`]: near-perfect-reconstruction cosine-modulated filter banks
//!   used for sub-band analysis/synthesis.
//! - [`features`]: STFT magnitudes, mel filterbank, corpus statistics,
//!   and the binary feature/stats file formats.
//! - [`generator`]: the noise-to-waveform generator built from
//!   conditionally normalized residual blocks with nearest-neighbor
//!   upsampling.
//! - [`discriminator`]: random-window sub-band discriminators.
//! - [`losses`]: multi-resolution spectral losses and hinge objectives.
//! - [`train`]: reverse-mode tape over the above, Adam, the two-phase
//!   training procedure, and checkpointing.
//!
//! All numeric code is generic over the scalar type via [`num::Real`]
//! (`f32` for the training/inference path, `f64` for gradient
//! verification); concrete aliases live at the crate root.

pub mod error;
pub mod num;
pub mod tensor;

pub mod discriminator;
pub mod features;
pub mod generator;
pub mod graph;
pub mod losses;
pub mod nn;
pub mod pqmf;
pub mod train;

pub use error::{Error, Result};

/// Feature map over `f32`, the inference/training scalar type.
pub type FeatureMap32 = nn::FeatureMap<f32>;
/// Feature map over `f64`, the gradient-verification scalar type.
pub type FeatureMap64 = nn::FeatureMap<f64>;
/// Tensor over `f32`.
pub type Tensor32 = tensor::Tensor<f32>;
/// Tensor over `f64`.
pub type Tensor64 = tensor::Tensor<f64>;

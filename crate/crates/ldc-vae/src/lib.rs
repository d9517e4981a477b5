//! Latent-consistency VAE training: an encoder and a sampler net are pulled
//! toward the decoder's Gibbs posterior by Stein variational transport
//! directions injected as gradients, while the decoder follows plain
//! reconstruction error. Includes the particle-transport machinery, a small
//! reverse-mode tensor tape, a baseline Gaussian-KL VAE, dataset handling,
//! two-sample evaluation metrics, and deterministic run orchestration.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gibbs;
pub mod gradcheck;
pub mod kernel;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod rng;
pub mod svgd;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

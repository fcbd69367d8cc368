//! Unsupervised decomposition of images into composable latent factors.
//!
//! An encoder splits each image into K latent vectors; a factor-conditioned
//! denoising model learns the score of the data distribution conditioned on
//! one latent at a time. Because every latent contributes an additive noise
//! prediction, factors can be recombined across images and across separately
//! trained models at sampling time.
//!
//! Module map:
//! - [`schedule`]: cumulative noise schedule and forward noising
//! - [`nn`]: minimal tensor layers with explicit backprop (single threaded)
//! - [`networks`]: latent encoder, conditional U-Net, checkpoint container
//! - [`training`]: joint encoder+denoiser training loop
//! - [`sampling`]: composed ancestral and DDIM samplers
//! - [`composition`]: decompose / reconstruct / recombine / cross-model ops
//! - [`datasets`]: procedural sprite and global-factor scene generators
//! - [`metrics`]: reconstruction, sprite-count, shape and disentanglement
//! - [`analytic`]: closed-form Gaussian components for end-to-end checks

pub mod analytic;
pub mod composition;
pub mod datasets;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod sampling;
pub mod schedule;
pub mod training;

mod error;

pub use error::{Error, Result};

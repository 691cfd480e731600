//! Lossless codec for Bayer-pattern raw images with a bit-depth adaptive
//! learned entropy model.
//!
//! The pipeline packs the mosaic into four half-resolution RGGB planes,
//! tiles it into patches, computes each patch's bit depth, and codes pixels
//! with a channel-autoregressive discrete logistic mixture conditioned on a
//! bit-depth embedding. Latents from a small hyperprior network are coded
//! alongside as side information, and a range coder makes the whole thing
//! bit-exact.

pub mod bitdepth;
pub mod coder;
pub mod entropy;
pub mod error;
pub mod codec;
pub mod container;
pub mod nn;
pub mod raw;
pub mod train;

pub use error::{Error, Result};

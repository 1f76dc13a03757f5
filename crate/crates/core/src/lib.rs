//! Blind super-resolution of RGB images via conditional diffusion.
//!
//! The crate covers the full desk-scale pipeline: parametric blur/noise
//! degradation simulation, an unsupervised contrastive degradation
//! representation, an RRDB content encoder, a conditional U-Net denoiser
//! trained to predict the clean image, and interval-subsampled reverse
//! diffusion for inference. Everything runs on CPU in f32 on top of a small
//! reverse-mode tensor substrate.

pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::{grad_check, Gradients, Tensor};

pub mod degrade;
pub mod degrep;
pub mod denoiser;
pub mod image;
pub mod lrenc;
pub mod nn;
pub mod schedule;

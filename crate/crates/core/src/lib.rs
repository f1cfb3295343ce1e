//! Blind image denoising with a residual transformation network trained
//! under two learned adversarial priors: a noise-level discriminator on
//! fused features behind a gradient reversal layer, and a perceptual patch
//! discriminator on output images.

pub mod app;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

//! End-to-end toolkit for imaging through atmospheric turbulence:
//! synthesize degraded frame sequences from clean text images, train a
//! small channel-attention encoder-decoder to restore them, and run tiled
//! multi-inference with rotation augmentation.
//!
//! Modules:
//! - [`tensor`]: dense tensors with reverse-mode autodiff (the training core)
//! - [`imgbuf`]: the `[0,1]` HWC image carrier, PNG I/O and raster helpers
//! - [`metrics`]: PSNR, SSIM and the trainable L1+SSIM objective
//! - [`turbsim`]: tilt-and-blur turbulence simulator
//! - [`datagen`]: synthetic text-image dataset builder
//! - [`model`]: the restoration network and its checkpoints
//! - [`pipeline`]: training loop, patch tiling, rotation TTA, multi-inference

pub mod datagen;
pub mod error;
pub mod imgbuf;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod turbsim;

pub use error::{Error, Result};

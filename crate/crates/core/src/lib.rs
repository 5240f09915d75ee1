//! DehazeSNN: a U-Net-like spiking network for single image dehazing.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: NCHW tensors and a reverse-mode differentiation tape.
//! - [`olif`]: the orthogonal leaky-integrate-and-fire block, which scans
//!   feature maps in spatial group steps along two directions.
//! - [`blocks`]: SNN blocks (OLIF + MLP residual pair), channel norm,
//!   drop path and selective-kernel skip fusion.
//! - [`model`]: the five-stage encoder-decoder, parameter store,
//!   checkpoints and parameter/MAC accounting.
//! - [`loss`] and [`metrics`]: training loss and PSNR/SSIM.
//! - [`train`]: data pipeline, synthetic haze, AdamW, schedule and loops.
//! - [`config`]: the TOML run configuration.
//! - [`gradcheck`]: finite-difference verification of every reverse rule.

pub mod tensor;
pub mod olif;
pub mod blocks;
pub mod model;
pub mod loss;
pub mod metrics;
pub mod train;
pub mod config;
pub mod gradcheck;

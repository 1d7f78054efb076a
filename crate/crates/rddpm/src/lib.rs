//! Robust denoising diffusion for anomaly segmentation on contaminated data.
//!
//! This crate trains a small diffusion model to predict injected Gaussian
//! noise and uses partial noising plus reverse denoising to reconstruct an
//! anomaly-free version of an input image; the per-pixel reconstruction
//! error is the anomaly heatmap. Training data may contain undetected
//! defects, so the trainer supports robust objectives (Huber, least trimmed
//! squares, L1) alongside the usual mean squared error.
//!
//! Module map:
//! - [`core`]: image tensors, deterministic RNG streams, PNG I/O.
//! - [`schedule`]: the noise schedule and per-timestep coefficients.
//! - [`diffusion`]: forward noising, reverse sampling, reconstruction.
//! - [`losses`]: residuals plus L2 / L1 / Huber / trimmed losses with exact
//!   gradients with respect to model predictions.
//! - [`model`]: the noise-predictor interface, a small convolutional
//!   reference network with handwritten backprop, and finite-difference
//!   gradient checking.
//! - [`trainer`]: training loop, Adam optimizer, checkpoints.
//! - [`corruption`]: synthetic texture data, defect injection with exact
//!   ground-truth masks, and an MVTec-layout loader.
//! - [`segmentation`]: heatmap generation and full-image stitching.
//! - [`metrics`]: pixel-level AUROC / AUPRC / masked MSE.
//! - [`cli`]: the `rddpm` command-line front end.

pub mod cli;
pub mod core;
pub mod corruption;
pub mod diffusion;
mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod schedule;
pub mod segmentation;
pub mod trainer;

pub use error::{Error, Result};

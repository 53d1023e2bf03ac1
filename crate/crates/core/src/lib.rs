//! Conditional denoising diffusion for unpaired visible/infrared image translation.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`autograd`], [`params`], [`nn`]: a compact CPU tensor engine with
//!   reverse-mode differentiation, sufficient for the denoiser and the toy classifier.
//! - [`schedule`]: noise schedule and closed-form forward process.
//! - [`conditioning`]: high-pass / edge condition images and the low-pass reference.
//! - [`denoiser`]: the noise-prediction U-Net with indicator embeddings.
//! - [`trainer`]: the conditional denoising objective with indicator dropout.
//! - [`sampler`]: guided DDPM/DDIM sampling and cross-modality translation.
//! - [`labels`]: noise-robust classification losses.
//! - [`evalkit`]: re-identification classifier, retrieval metrics and translation scores.
//! - [`synthdata`]: procedural two-modality dataset and directory ingestion.
//! - [`config`], [`checkpoint`]: run configuration and parameter archives.

pub mod autograd;
pub mod batch;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod evalkit;
pub mod labels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod sampler;
pub mod schedule;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use batch::{ImageBatch, ModalityIndicator};
pub use error::{Error, Result};
pub use tensor::Tensor;

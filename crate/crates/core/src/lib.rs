//! Gaussian-splat diffusion for few-view object reconstruction.
//!
//! The crate is organised bottom-up:
//!
//! - [`gaussians`], [`camera`], [`image`], [`pointcloud`]: domain types and I/O.
//! - [`render`]: differentiable tile-based splatting.
//! - [`nn`]: a small reverse-mode tensor engine, the set-transformer denoiser and AdamW.
//! - [`diffusion`]: noise schedule, training objective, DDIM and Langevin steps.
//! - [`guidance`]: view-guided sampling through rendering gradients.
//! - [`fitting`]: multi-view regression with budgeted densification.
//! - [`pipeline`]: synthetic data, training, reconstruction loop, metrics, config.

pub mod camera;
pub mod diffusion;
pub mod error;
pub mod fitting;
pub mod gaussians;
pub mod guidance;
pub mod image;
pub mod nn;
pub mod pipeline;
pub mod pointcloud;
pub mod render;

pub use error::{Error, Result};

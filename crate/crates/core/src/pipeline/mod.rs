//! Synthetic data, training, the polish-and-reuse reconstruction loop,
//! evaluation and configuration.

pub mod config;
pub mod dataset;
pub mod driver;
pub mod eval;
pub mod metrics;
pub mod refine;
pub mod scene;
pub mod train;

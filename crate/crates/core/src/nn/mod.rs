//! Tensor engine, denoiser network, optimizer and checkpoints.

pub mod checkpoint;
pub mod denoiser;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use denoiser::{DenoiserConfig, DenoiserGraph, DenoiserWeights};
pub use optim::{AdamW, AdamWConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

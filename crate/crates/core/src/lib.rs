//! Diffusion-autoencoder semantic communication: noise schedules, the
//! conditional diffusion process, channel models, networks, training and
//! evaluation.

pub mod baselines;
pub mod channel;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod encoder;
mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod params;
pub mod random;
pub mod schedules;
pub mod trainer;

pub use candle_core::{DType, Device, Tensor};
pub use error::{Error, Result};

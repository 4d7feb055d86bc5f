//! Acquisition-time conditioned 3D segmentation for dynamic contrast-enhanced volumes.
//!
//! A small U-Net whose intermediate feature maps can be modulated by feature-wise
//! linear modulation (FiLM) driven by the acquisition times of the input phases,
//! together with a synthetic contrast-kinetics phantom, a training harness and the
//! usual segmentation metrics.

pub mod cli;
pub mod film;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod verify;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error("invalid acquisition times: {0}")]
    InvalidTimes(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("phantom generation failed: {0}")]
    Phantom(String),
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

//! Image-model IPv6 target generation.
//!
//! Seeds are encoded as 8×16 bit images, grouped by K-means over VAE
//! latents, and each group gets its own autoregressive pixel model. The
//! models then generate candidates in rounds; probe results feed back into
//! them between rounds.

pub mod config;
pub mod export;
pub mod pipeline;
pub mod rundir;

pub use config::RunConfig;
pub use pipeline::{run, run_ablation, run_two_stage, RunOutcome};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Address(#[from] hitpix_core::addr::AddrError),
    #[error(transparent)]
    Image(#[from] hitpix_core::image::ImageError),
    #[error(transparent)]
    Oracle(#[from] hitpix_core::oracle::OracleError),
    #[error(transparent)]
    Metric(#[from] hitpix_core::metrics::MetricError),
    #[error(transparent)]
    Tree(#[from] hitpix_core::baseline::TreeError),
    #[error(transparent)]
    Cluster(#[from] hitpix_nn::vaecluster::ClusterError),
    #[error(transparent)]
    Pixel(#[from] hitpix_nn::pixelgen::PixelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

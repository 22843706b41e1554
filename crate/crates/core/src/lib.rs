//! Multimodal graph-attention anomaly detection for multivariate time series.
//!
//! The pipeline: series embeddings define a sparse similarity graph
//! ([`graph`]); multi-head and modality-aware graph attention mixes the
//! readings of neighboring sensors ([`mgat`]); a convolution stack summarizes
//! each window over time ([`temporal`]); a variational reconstruction head and
//! a one-step forecaster ([`heads`]) are trained jointly ([`training`]); their
//! errors become per-sensor anomaly scores thresholded by peaks-over-threshold
//! ([`scoring`]).

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod heads;
pub mod metrics;
pub mod mgat;
pub mod model;
pub mod nn;
pub mod scoring;
pub mod temporal;
pub mod training;

pub use error::{Error, Result};

/// Crate version, stamped into every output file.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

//! End-to-end driver for probabilistic kernel PCA control charts: data
//! ingestion, autoscaling, calibration, posterior sampling, propagation,
//! chart and contribution export, metrics and static plots.

pub mod app;
pub mod benchmark;
pub mod config;
pub mod dataset;
pub mod error;
pub mod io;
pub mod manifest;
pub mod pipeline;
pub mod plot;
pub mod scaler;

pub use error::{CliError, Result};

//! Probabilistic kernel-PCA statistical process monitoring.
//!
//! The crate covers the full chain from kernel calibration to uncertainty-aware
//! control charts:
//!
//! * [`kernels`] – SE/ARD kernels, Gram matrices, centering, input gradients
//! * [`kpca`] – K-PCA monitoring model, T²/SPE, limits and contributions
//! * [`calibration`] – GP-marginal and K-PCR likelihoods, deterministic optimizers
//! * [`unsupervised`] – healthy-data lengthscale rules and chart pseudo-labels
//! * [`mcmc`] – log-posterior, AM/DRAM/HMC/NUTS samplers, ESS and diagnostics
//! * [`propagation`] – pushing posterior draws through K-PCA into chart bands
//! * [`metrics`] – FAR/FDR, composite indicator, AUC, F1

pub mod calibration;
pub mod error;
pub mod kernels;
pub mod kpca;
pub mod mcmc;
pub mod metrics;
pub mod propagation;
pub mod stats;
pub mod unsupervised;

pub use error::{Error, Result};

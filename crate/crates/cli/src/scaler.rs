//! Autoscaling with statistics from healthy training data only.

use kmspc_core::stats;
use nalgebra::DMatrix;

use crate::dataset::Dataset;
use crate::error::{CliError, Result};

/// Per-variable mean and sample standard deviation (`n - 1` denominator).
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub names: Vec<String>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

pub fn fit_scaler(healthy: &Dataset) -> Result<Scaler> {
    let mut means = Vec::with_capacity(healthy.p());
    let mut sds = Vec::with_capacity(healthy.p());
    for (j, name) in healthy.names.iter().enumerate() {
        let col: Vec<f64> = healthy.x.column(j).iter().copied().collect();
        let sd = stats::std_dev(&col);
        if !(sd > 0.0) {
            return Err(CliError::ConstantColumn(name.clone()));
        }
        means.push(stats::mean(&col));
        sds.push(sd);
    }
    Ok(Scaler {
        names: healthy.names.clone(),
        means,
        sds,
    })
}

pub fn apply_scaler(scaler: &Scaler, data: &Dataset) -> Result<Dataset> {
    if data.names != scaler.names {
        return Err(CliError::Config(format!(
            "variables {:?} do not match the scaler's {:?}",
            data.names, scaler.names
        )));
    }
    let x = DMatrix::from_fn(data.n(), data.p(), |i, j| (data.x[(i, j)] - scaler.means[j]) / scaler.sds[j]);
    Ok(data.with_x(x))
}

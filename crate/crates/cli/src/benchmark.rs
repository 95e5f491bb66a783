//! Synthetic nonlinear process with an injected mean-shift fault.
//!
//! Two latent drivers feed ten measured variables through smooth nonlinear
//! maps plus Gaussian sensor noise. The fault adds a constant offset to a
//! subset of variables, moving samples off the healthy manifold.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{write_dataset, Dataset, LoadOptions};
use crate::error::{CliError, Result};

pub const N_VARIABLES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub n_healthy: usize,
    pub n_monitor: usize,
    /// First faulty sample of the monitored set.
    pub fault_start: usize,
    /// Calibration samples per class.
    pub n_calibration_per_class: usize,
    pub noise_sd: f64,
    /// Offset added to each variable in `fault_variables`.
    pub shift: f64,
    pub fault_variables: Vec<usize>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            n_healthy: 200,
            n_monitor: 200,
            fault_start: 100,
            n_calibration_per_class: 60,
            noise_sd: 0.1,
            shift: 1.5,
            fault_variables: vec![2, 5, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub healthy: Dataset,
    pub monitor: Dataset,
    pub calibration: Dataset,
}

pub fn variable_names() -> Vec<String> {
    (1..=N_VARIABLES).map(|j| format!("x{j}")).collect()
}

/// Noise-free process outputs for latent drivers `(z1, z2)`.
pub fn process(z1: f64, z2: f64) -> [f64; N_VARIABLES] {
    [
        z1,
        z2,
        z1 * z1,
        z1 * z2,
        z1.sin(),
        (0.8 * z2).cos(),
        (0.5 * z1).exp(),
        z2 * z2 - z1,
        (z1 + z2).tanh(),
        z1 + z2 * z2 * z2 / 3.0,
    ]
}

fn draw(rng: &mut ChaCha8Rng, cfg: &BenchmarkConfig, faulty: bool) -> [f64; N_VARIABLES] {
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    let mut x = process(z1, z2);
    for v in x.iter_mut() {
        let e: f64 = rng.sample(StandardNormal);
        *v += cfg.noise_sd * e;
    }
    if faulty {
        for &j in &cfg.fault_variables {
            x[j] += cfg.shift;
        }
    }
    x
}

fn block(rng: &mut ChaCha8Rng, cfg: &BenchmarkConfig, faulty: &[bool]) -> DMatrix<f64> {
    let mut values = Vec::with_capacity(faulty.len() * N_VARIABLES);
    for &f in faulty {
        values.extend(draw(rng, cfg, f));
    }
    DMatrix::from_row_slice(faulty.len(), N_VARIABLES, &values)
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

pub fn generate(cfg: &BenchmarkConfig) -> Result<Benchmark> {
    if cfg.fault_variables.iter().any(|&j| j >= N_VARIABLES) {
        return Err(CliError::Config(format!("fault variables must be below {N_VARIABLES}")));
    }
    if cfg.fault_start > cfg.n_monitor {
        return Err(CliError::Config("fault start beyond the monitored set".into()));
    }
    let names = variable_names();

    let healthy = Dataset::new(block(&mut stream(cfg.seed, 0), cfg, &vec![false; cfg.n_healthy]), names.clone());

    let m_labels: Vec<bool> = (0..cfg.n_monitor).map(|i| i >= cfg.fault_start).collect();
    let mut monitor = Dataset::new(block(&mut stream(cfg.seed, 1), cfg, &m_labels), names.clone());
    monitor.time = Some((0..cfg.n_monitor).map(|i| i as f64).collect());
    monitor.labels = Some(m_labels);

    let nc = cfg.n_calibration_per_class;
    let c_labels: Vec<bool> = (0..2 * nc).map(|i| i >= nc).collect();
    let mut calibration = Dataset::new(block(&mut stream(cfg.seed, 2), cfg, &c_labels), names);
    calibration.labels = Some(c_labels);

    Ok(Benchmark {
        healthy,
        monitor,
        calibration,
    })
}

/// Run configuration used with the generated files.
pub const RUN_CONFIG: &str = "\
# synthetic nonlinear benchmark
healthy = healthy.csv
monitor = monitor.csv
calibration = calibration.csv
kernel = se
route = gpc
optimizer = lbfgs
retain = frac:0.9
sampler = dram
draws = 500
confidence = 0.99
credible = 0.05
seed = 7
out = out
";

/// Writes `healthy.csv`, `monitor.csv`, `calibration.csv` and `run.conf`.
pub fn write_benchmark(dir: &Path, cfg: &BenchmarkConfig) -> Result<Benchmark> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let b = generate(cfg)?;
    let opts = LoadOptions::default();
    write_dataset(&dir.join("healthy.csv"), &b.healthy, &opts)?;
    write_dataset(&dir.join("monitor.csv"), &b.monitor, &opts)?;
    write_dataset(&dir.join("calibration.csv"), &b.calibration, &opts)?;
    let conf = dir.join("run.conf");
    std::fs::write(&conf, RUN_CONFIG).map_err(|e| CliError::io(&conf, e))?;
    Ok(b)
}

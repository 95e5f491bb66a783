//! Posterior sampling over log kernel parameters.
//!
//! The posterior combines independent Gaussian priors on each log-parameter
//! with any [`LogLikelihood`]. Four samplers are provided: adaptive Metropolis,
//! delayed-rejection adaptive Metropolis, Hamiltonian Monte Carlo and the
//! No-U-Turn sampler. A chain always starts at the supplied point, and a fixed
//! seed reproduces it bit for bit.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::calibration::LogLikelihood;
use crate::error::{Error, Result};
use crate::stats;

/// Default prior sd on every log-parameter.
pub const DEFAULT_PRIOR_SD: f64 = 0.5;
/// Central-difference step for gradients of the log-posterior.
pub const GRADIENT_STEP: f64 = 1e-5;

/// A differentiable log-density.
pub trait LogTarget: Send + Sync {
    fn dim(&self) -> usize;

    fn log_density(&self, theta: &[f64]) -> f64;

    /// Gradient of [`log_density`](Self::log_density); central differences by default.
    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; theta.len()];
        let mut probe = theta.to_vec();
        for d in 0..theta.len() {
            probe[d] = theta[d] + GRADIENT_STEP;
            let up = self.log_density(&probe);
            probe[d] = theta[d] - GRADIENT_STEP;
            let down = self.log_density(&probe);
            probe[d] = theta[d];
            g[d] = (up - down) / (2.0 * GRADIENT_STEP);
        }
        g
    }
}

/// Independent Gaussian priors on the log-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl PriorSpec {
    pub fn new(means: Vec<f64>, sds: Vec<f64>) -> Result<Self> {
        if means.len() != sds.len() {
            return Err(Error::Dimension {
                expected: means.len(),
                got: sds.len(),
                context: "prior sds",
            });
        }
        if sds.iter().any(|s| !(*s > 0.0 && s.is_finite())) || means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Input("prior sds must be positive and means finite".into()));
        }
        Ok(Self { means, sds })
    }

    /// Centred at `means` with the default sd everywhere.
    pub fn centered(means: Vec<f64>) -> Self {
        let sds = vec![DEFAULT_PRIOR_SD; means.len()];
        Self { means, sds }
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        theta
            .iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(t, (m, s))| {
                let z = (t - m) / s;
                -0.5 * z * z - s.ln() - 0.5 * (2.0 * PI).ln()
            })
            .sum()
    }
}

/// Prior times likelihood, on the log scale.
#[derive(Debug, Clone)]
pub struct LogPosterior<L> {
    pub prior: PriorSpec,
    pub likelihood: L,
}

impl<L: LogLikelihood> LogPosterior<L> {
    pub fn new(prior: PriorSpec, likelihood: L) -> Result<Self> {
        if prior.dim() != likelihood.dim() {
            return Err(Error::Dimension {
                expected: likelihood.dim(),
                got: prior.dim(),
                context: "prior length",
            });
        }
        Ok(Self { prior, likelihood })
    }

    /// Log-posterior value; non-finite likelihoods give `-∞`.
    pub fn log_posterior(&self, theta: &[f64]) -> f64 {
        if theta.len() != self.prior.dim() {
            return f64::NEG_INFINITY;
        }
        let ll = self.likelihood.log_likelihood(theta);
        if !ll.is_finite() {
            return f64::NEG_INFINITY;
        }
        self.prior.log_density(theta) + ll
    }
}

impl<L: LogLikelihood> LogTarget for LogPosterior<L> {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn log_density(&self, theta: &[f64]) -> f64 {
        self.log_posterior(theta)
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        (0..theta.len())
            .into_par_iter()
            .map(|d| {
                let mut up = theta.to_vec();
                let mut down = theta.to_vec();
                up[d] += GRADIENT_STEP;
                down[d] -= GRADIENT_STEP;
                (self.log_posterior(&up) - self.log_posterior(&down)) / (2.0 * GRADIENT_STEP)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Am,
    Dram,
    Hmc,
    Nuts,
}

impl SamplerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Am => "am",
            Self::Dram => "dram",
            Self::Hmc => "hmc",
            Self::Nuts => "nuts",
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "am" => Ok(Self::Am),
            "dram" => Ok(Self::Dram),
            "hmc" => Ok(Self::Hmc),
            "nuts" => Ok(Self::Nuts),
            other => Err(Error::Input(format!("unknown sampler '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmConfig {
    pub n_draws: usize,
    pub burn_in: usize,
    /// Sd of the isotropic proposal used before adaptation starts.
    pub init_cov_scale: f64,
    pub adapt_start: usize,
    pub epsilon_reg: f64,
    pub seed: u64,
}

impl Default for AmConfig {
    fn default() -> Self {
        Self {
            n_draws: 5000,
            burn_in: 2000,
            init_cov_scale: 0.1,
            adapt_start: 200,
            epsilon_reg: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DramConfig {
    pub am: AmConfig,
    pub stage2_scale: f64,
}

impl Default for DramConfig {
    fn default() -> Self {
        Self {
            am: AmConfig::default(),
            stage2_scale: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmcConfig {
    pub n_draws: usize,
    pub burn_in: usize,
    pub step_size: f64,
    pub n_leapfrog: usize,
    /// Diagonal of the mass matrix; `None` is the identity.
    pub mass_diag: Option<Vec<f64>>,
    /// Leading iterations during which the step size is nudged toward the
    /// target acceptance; the step is fixed afterwards.
    pub tune_steps: usize,
    pub target_accept: f64,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            n_draws: 1000,
            burn_in: 200,
            step_size: 0.1,
            n_leapfrog: 20,
            mass_diag: None,
            tune_steps: 100,
            target_accept: 0.65,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NutsConfig {
    pub n_draws: usize,
    pub burn_in: usize,
    pub step_size: f64,
    /// At most `2^max_tree_depth - 1` leapfrog steps per draw; zero and one
    /// both mean a single step.
    pub max_tree_depth: usize,
    pub divergence_threshold: f64,
    pub mass_diag: Option<Vec<f64>>,
    pub tune_steps: usize,
    pub target_accept: f64,
    pub seed: u64,
}

impl Default for NutsConfig {
    fn default() -> Self {
        Self {
            n_draws: 1000,
            burn_in: 200,
            step_size: 0.1,
            max_tree_depth: 10,
            divergence_threshold: 1000.0,
            mass_diag: None,
            tune_steps: 100,
            target_accept: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SamplerConfig {
    Am(AmConfig),
    Dram(DramConfig),
    Hmc(HmcConfig),
    Nuts(NutsConfig),
}

impl SamplerConfig {
    /// Defaults for a sampler, with the given seed.
    pub fn defaults(kind: SamplerKind, seed: u64) -> Self {
        match kind {
            SamplerKind::Am => Self::Am(AmConfig { seed, ..Default::default() }),
            SamplerKind::Dram => Self::Dram(DramConfig {
                am: AmConfig { seed, ..Default::default() },
                ..Default::default()
            }),
            SamplerKind::Hmc => Self::Hmc(HmcConfig { seed, ..Default::default() }),
            SamplerKind::Nuts => Self::Nuts(NutsConfig { seed, ..Default::default() }),
        }
    }

    pub fn kind(&self) -> SamplerKind {
        match self {
            Self::Am(_) => SamplerKind::Am,
            Self::Dram(_) => SamplerKind::Dram,
            Self::Hmc(_) => SamplerKind::Hmc,
            Self::Nuts(_) => SamplerKind::Nuts,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Self::Am(c) => c.seed,
            Self::Dram(c) => c.am.seed,
            Self::Hmc(c) => c.seed,
            Self::Nuts(c) => c.seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        match &mut self {
            Self::Am(c) => c.seed = seed,
            Self::Dram(c) => c.am.seed = seed,
            Self::Hmc(c) => c.seed = seed,
            Self::Nuts(c) => c.seed = seed,
        }
        self
    }
}

/// Sampler-specific bookkeeping.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChainStats {
    pub stage2_accepts: usize,
    pub divergences: usize,
    pub final_step_size: Option<f64>,
    pub mean_tree_depth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    /// `M` draws of the log-parameters; `draws[0]` is the initial point.
    pub draws: Vec<Vec<f64>>,
    pub log_post: Vec<f64>,
    /// Fraction of transitions accepted.
    pub acceptance_rate: f64,
    pub sampler: SamplerKind,
    pub seed: u64,
    pub burn_in: usize,
    pub stats: ChainStats,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.draws.first().map_or(0, |d| d.len())
    }

    /// Draws after burn-in.
    pub fn retained(&self) -> &[Vec<f64>] {
        &self.draws[self.burn_in.min(self.draws.len())..]
    }

    /// One parameter's trace after burn-in.
    pub fn trace(&self, j: usize) -> Vec<f64> {
        self.retained().iter().map(|d| d[j]).collect()
    }

    pub fn posterior_mean(&self) -> Vec<f64> {
        (0..self.dim()).map(|j| stats::mean(&self.trace(j))).collect()
    }
}

fn check_common(target: &dyn LogTarget, init: &[f64], n_draws: usize, burn_in: usize) -> Result<f64> {
    if init.len() != target.dim() {
        return Err(Error::Dimension {
            expected: target.dim(),
            got: init.len(),
            context: "initial point",
        });
    }
    if n_draws == 0 || burn_in >= n_draws {
        return Err(Error::Input(format!("need burn_in < n_draws, got {burn_in} and {n_draws}")));
    }
    let lp = target.log_density(init);
    if !lp.is_finite() {
        return Err(Error::NonFiniteInit);
    }
    Ok(lp)
}

fn std_normals(rng: &mut ChaCha8Rng, m: usize) -> DVector<f64> {
    DVector::from_fn(m, |_, _| rng.sample(StandardNormal))
}

/// Running mean and scatter of the chain history.
struct RunningCov {
    n: usize,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
}

impl RunningCov {
    fn new(m: usize) -> Self {
        Self {
            n: 0,
            mean: DVector::zeros(m),
            scatter: DMatrix::zeros(m, m),
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let x = DVector::from_column_slice(x);
        let delta = &x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = &x - &self.mean;
        self.scatter += &delta * delta2.transpose();
    }

    fn covariance(&self) -> DMatrix<f64> {
        &self.scatter / (self.n.max(2) - 1) as f64
    }
}

/// Proposal covariance factor for the current iteration of AM/DRAM.
fn am_factor(cfg: &AmConfig, m: usize, history: &RunningCov, iter: usize) -> DMatrix<f64> {
    if iter <= cfg.adapt_start || history.n < 2 {
        return DMatrix::identity(m, m) * cfg.init_cov_scale;
    }
    let sd = 2.38 * 2.38 / m as f64;
    let mut eps = cfg.epsilon_reg.max(f64::MIN_POSITIVE);
    loop {
        let cov = history.covariance() * sd + DMatrix::identity(m, m) * eps;
        if let Some(ch) = Cholesky::new(cov) {
            return ch.unpack();
        }
        eps *= 10.0;
        if eps > 1.0 {
            return DMatrix::identity(m, m) * cfg.init_cov_scale;
        }
    }
}

fn add(x: &[f64], step: &DVector<f64>) -> Vec<f64> {
    x.iter().zip(step.iter()).map(|(a, b)| a + b).collect()
}

/// Adaptive Metropolis.
pub fn sample_am(target: &dyn LogTarget, init: &[f64], cfg: &AmConfig) -> Result<Chain> {
    run_metropolis(target, init, cfg, None)
}

/// Two-stage delayed-rejection adaptive Metropolis.
pub fn sample_dram(target: &dyn LogTarget, init: &[f64], cfg: &DramConfig) -> Result<Chain> {
    if !(cfg.stage2_scale > 0.0) {
        return Err(Error::Input("stage2_scale must be positive".into()));
    }
    run_metropolis(target, init, &cfg.am, Some(cfg.stage2_scale))
}

fn log_alpha(from: f64, to: f64) -> f64 {
    if to == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        (to - from).min(0.0)
    }
}

/// `ln(1 - exp(a))` for `a ≤ 0`.
fn log1m_exp(a: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        0.0
    } else if a > -std::f64::consts::LN_2 {
        (-a.exp_m1()).ln()
    } else {
        (-a.exp()).ln_1p()
    }
}

fn run_metropolis(target: &dyn LogTarget, init: &[f64], cfg: &AmConfig, stage2: Option<f64>) -> Result<Chain> {
    if !(cfg.init_cov_scale > 0.0) || cfg.epsilon_reg < 0.0 {
        return Err(Error::Input("proposal scales must be positive".into()));
    }
    let lp0 = check_common(target, init, cfg.n_draws, cfg.burn_in)?;
    let m = init.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // second-stage proposals use their own stream so first-stage draws match AM
    let mut rng2 = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng2.set_stream(1);

    let mut draws = Vec::with_capacity(cfg.n_draws);
    let mut log_post = Vec::with_capacity(cfg.n_draws);
    let mut history = RunningCov::new(m);
    let mut x = init.to_vec();
    let mut lp = lp0;
    draws.push(x.clone());
    log_post.push(lp);
    history.push(&x);
    let mut accepted = 0usize;
    let mut stage2_accepts = 0usize;

    for iter in 1..cfg.n_draws {
        let l = am_factor(cfg, m, &history, iter);
        let z = std_normals(&mut rng, m);
        let log_u: f64 = rng.random::<f64>().ln();
        let y1 = add(&x, &(&l * &z));
        let lp1 = target.log_density(&y1);
        let a1 = log_alpha(lp, lp1);
        if log_u <= a1 {
            x = y1;
            lp = lp1;
            accepted += 1;
        } else if let Some(scale) = stage2 {
            let z2 = std_normals(&mut rng2, m);
            let log_u2: f64 = rng2.random::<f64>().ln();
            let y2 = add(&x, &(&l * &z2 * scale));
            let lp2 = target.log_density(&y2);
            if lp2 > f64::NEG_INFINITY {
                // first-stage proposal densities, shared normalizer cancels
                let q = |from: &[f64], to: &[f64]| -> f64 {
                    let d = DVector::from_iterator(m, to.iter().zip(from).map(|(a, b)| a - b));
                    match l.clone().solve_lower_triangular(&d) {
                        Some(w) => -0.5 * w.norm_squared(),
                        None => f64::NEG_INFINITY,
                    }
                };
                let num = lp2 + q(&y2, &y1) + log1m_exp(log_alpha(lp2, lp1));
                let den = lp + q(&x, &y1) + log1m_exp(a1);
                let a2 = (num - den).min(0.0);
                if log_u2 <= a2 {
                    x = y2;
                    lp = lp2;
                    accepted += 1;
                    stage2_accepts += 1;
                }
            }
        }
        draws.push(x.clone());
        log_post.push(lp);
        history.push(&x);
    }
    Ok(Chain {
        draws,
        log_post,
        acceptance_rate: accepted as f64 / (cfg.n_draws - 1).max(1) as f64,
        sampler: if stage2.is_some() { SamplerKind::Dram } else { SamplerKind::Am },
        seed: cfg.seed,
        burn_in: cfg.burn_in,
        stats: ChainStats {
            stage2_accepts,
            ..Default::default()
        },
    })
}

fn mass_vectors(mass: &Option<Vec<f64>>, m: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mass = mass.clone().unwrap_or_else(|| vec![1.0; m]);
    if mass.len() != m || mass.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Input("mass diagonal must be positive with one entry per parameter".into()));
    }
    let inv = mass.iter().map(|v| 1.0 / v).collect();
    Ok((mass, inv))
}

fn kinetic(p: &[f64], mass_inv: &[f64]) -> f64 {
    0.5 * p.iter().zip(mass_inv).map(|(a, b)| a * a * b).sum::<f64>()
}

/// A phase-space point with its cached density and gradient.
#[derive(Debug, Clone)]
struct State {
    theta: Vec<f64>,
    p: Vec<f64>,
    lp: f64,
    grad: Vec<f64>,
}

fn leapfrog_step(target: &dyn LogTarget, s: &State, step: f64, mass_inv: &[f64]) -> Option<State> {
    let half: Vec<f64> = s.p.iter().zip(&s.grad).map(|(p, g)| p + 0.5 * step * g).collect();
    let theta: Vec<f64> = s.theta.iter().zip(&half).zip(mass_inv).map(|((t, p), mi)| t + step * mi * p).collect();
    let lp = target.log_density(&theta);
    if !lp.is_finite() {
        return None;
    }
    let grad = target.gradient(&theta);
    if grad.iter().any(|g| !g.is_finite()) {
        return None;
    }
    let p = half.iter().zip(&grad).map(|(p, g)| p + 0.5 * step * g).collect();
    Some(State { theta, p, lp, grad })
}

/// Runs `n_steps` leapfrog steps from `(theta, p)`; `None` if the trajectory
/// leaves the support or meets a non-finite gradient.
pub fn leapfrog(target: &dyn LogTarget, theta: &[f64], p: &[f64], step: f64, n_steps: usize, mass_inv: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let lp = target.log_density(theta);
    if !lp.is_finite() {
        return None;
    }
    let mut s = State {
        theta: theta.to_vec(),
        p: p.to_vec(),
        lp,
        grad: target.gradient(theta),
    };
    for _ in 0..n_steps {
        s = leapfrog_step(target, &s, step, mass_inv)?;
    }
    Some((s.theta, s.p))
}

/// Change in total energy `H = -log π(θ) + ½ pᵀM⁻¹p` along a leapfrog trajectory.
pub fn energy_error(target: &dyn LogTarget, theta: &[f64], p: &[f64], step: f64, n_steps: usize, mass_inv: &[f64]) -> Option<f64> {
    let h0 = -target.log_density(theta) + kinetic(p, mass_inv);
    let (t1, p1) = leapfrog(target, theta, p, step, n_steps, mass_inv)?;
    Some(-target.log_density(&t1) + kinetic(&p1, mass_inv) - h0)
}

fn draw_momentum(rng: &mut ChaCha8Rng, mass: &[f64]) -> Vec<f64> {
    mass.iter().map(|m| m.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Multiplicative warm-up: the step grows after a proposal accepted with
/// probability above target and shrinks otherwise. When warm-up ends the step
/// is fixed at the geometric mean of the steps used over its second half.
struct StepTuner {
    step: f64,
    tune_steps: usize,
    log_sum: f64,
    count: usize,
}

impl StepTuner {
    fn new(step: f64, tune_steps: usize) -> Self {
        Self {
            step,
            tune_steps,
            log_sum: 0.0,
            count: 0,
        }
    }

    fn update(&mut self, iter: usize, accept_stat: f64, target: f64) {
        if iter > self.tune_steps {
            return;
        }
        if 2 * iter > self.tune_steps {
            self.log_sum += self.step.ln();
            self.count += 1;
        }
        self.step *= if accept_stat > target { 1.1 } else { 0.9 };
        if iter == self.tune_steps && self.count > 0 {
            self.step = (self.log_sum / self.count as f64).exp();
        }
    }
}

/// Relative half-width of the uniform per-iteration HMC step jitter, which
/// keeps a fixed trajectory from resonating with the target's periods.
pub const HMC_STEP_JITTER: f64 = 0.2;

/// Hamiltonian Monte Carlo with a fixed number of leapfrog steps.
pub fn sample_hmc(target: &dyn LogTarget, init: &[f64], cfg: &HmcConfig) -> Result<Chain> {
    if !(cfg.step_size > 0.0) {
        return Err(Error::Input("step size must be positive".into()));
    }
    let lp0 = check_common(target, init, cfg.n_draws, cfg.burn_in)?;
    let (mass, mass_inv) = mass_vectors(&cfg.mass_diag, init.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tuner = StepTuner::new(cfg.step_size, cfg.tune_steps);
    let mut cur = State {
        theta: init.to_vec(),
        p: vec![0.0; init.len()],
        lp: lp0,
        grad: target.gradient(init),
    };
    let mut draws = vec![cur.theta.clone()];
    let mut log_post = vec![cur.lp];
    let mut accepted = 0usize;

    for iter in 1..cfg.n_draws {
        cur.p = draw_momentum(&mut rng, &mass);
        let log_u: f64 = rng.random::<f64>().ln();
        let eps = tuner.step * (1.0 + HMC_STEP_JITTER * (2.0 * rng.random::<f64>() - 1.0));
        let h0 = -cur.lp + kinetic(&cur.p, &mass_inv);
        let mut prop = Some(cur.clone());
        if cur.grad.iter().any(|g| !g.is_finite()) {
            prop = None;
        }
        for _ in 0..cfg.n_leapfrog {
            prop = prop.and_then(|s| leapfrog_step(target, &s, eps, &mass_inv));
        }
        let log_a = match &prop {
            Some(s) => (h0 - (-s.lp + kinetic(&s.p, &mass_inv))).min(0.0),
            None => f64::NEG_INFINITY,
        };
        let log_a = if log_a.is_nan() { f64::NEG_INFINITY } else { log_a };
        if log_u <= log_a {
            cur = prop.expect("accepted proposal exists");
            accepted += 1;
        }
        tuner.update(iter, log_a.exp(), cfg.target_accept);
        draws.push(cur.theta.clone());
        log_post.push(cur.lp);
    }
    Ok(Chain {
        draws,
        log_post,
        acceptance_rate: accepted as f64 / (cfg.n_draws - 1).max(1) as f64,
        sampler: SamplerKind::Hmc,
        seed: cfg.seed,
        burn_in: cfg.burn_in,
        stats: ChainStats {
            final_step_size: Some(tuner.step),
            ..Default::default()
        },
    })
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

struct Tree {
    minus: State,
    plus: State,
    proposal: State,
    log_weight: f64,
    /// The trajectory turned back on itself, diverged or left the support.
    stop: bool,
    diverged: bool,
    accept_sum: f64,
    n_steps: usize,
}

/// `(θ⁺ - θ⁻)·M⁻¹p⁻ ≥ 0` and `(θ⁺ - θ⁻)·M⁻¹p⁺ ≥ 0`.
pub fn no_u_turn(theta_minus: &[f64], theta_plus: &[f64], p_minus: &[f64], p_plus: &[f64], mass_inv: &[f64]) -> bool {
    let span: Vec<f64> = theta_plus.iter().zip(theta_minus).map(|(a, b)| a - b).collect();
    let dot = |p: &[f64]| span.iter().zip(p).zip(mass_inv).map(|((s, p), mi)| s * p * mi).sum::<f64>();
    dot(p_minus) >= 0.0 && dot(p_plus) >= 0.0
}

struct NutsCtx<'a> {
    target: &'a dyn LogTarget,
    mass_inv: &'a [f64],
    step: f64,
    h0: f64,
    max_delta: f64,
}

impl NutsCtx<'_> {
    fn build(&self, from: &State, direction: f64, depth: usize, rng: &mut ChaCha8Rng) -> Tree {
        if depth == 0 {
            let next = leapfrog_step(self.target, from, direction * self.step, self.mass_inv);
            return match next {
                Some(s) => {
                    let h = -s.lp + kinetic(&s.p, self.mass_inv);
                    let delta = h - self.h0;
                    let delta = if delta.is_nan() { f64::INFINITY } else { delta };
                    let diverged = delta > self.max_delta;
                    Tree {
                        minus: s.clone(),
                        plus: s.clone(),
                        proposal: s,
                        log_weight: -delta,
                        stop: diverged,
                        diverged,
                        accept_sum: (-delta).min(0.0).exp(),
                        n_steps: 1,
                    }
                }
                None => Tree {
                    minus: from.clone(),
                    plus: from.clone(),
                    proposal: from.clone(),
                    log_weight: f64::NEG_INFINITY,
                    stop: true,
                    diverged: true,
                    accept_sum: 0.0,
                    n_steps: 1,
                },
            };
        }
        let mut first = self.build(from, direction, depth - 1, rng);
        if first.stop {
            return first;
        }
        let edge = if direction > 0.0 { first.plus.clone() } else { first.minus.clone() };
        let second = self.build(&edge, direction, depth - 1, rng);
        if direction > 0.0 {
            first.plus = second.plus.clone();
        } else {
            first.minus = second.minus.clone();
        }
        let total = log_add(first.log_weight, second.log_weight);
        if second.log_weight > f64::NEG_INFINITY && rng.random::<f64>().ln() < second.log_weight - total {
            first.proposal = second.proposal.clone();
        }
        first.log_weight = total;
        first.accept_sum += second.accept_sum;
        first.n_steps += second.n_steps;
        first.diverged |= second.diverged;
        first.stop = second.stop || !no_u_turn(&first.minus.theta, &first.plus.theta, &first.minus.p, &first.plus.p, self.mass_inv);
        first
    }
}

/// No-U-Turn sampler with multinomial selection along the trajectory.
pub fn sample_nuts(target: &dyn LogTarget, init: &[f64], cfg: &NutsConfig) -> Result<Chain> {
    if !(cfg.step_size > 0.0) {
        return Err(Error::Input("step size must be positive".into()));
    }
    let lp0 = check_common(target, init, cfg.n_draws, cfg.burn_in)?;
    let (mass, mass_inv) = mass_vectors(&cfg.mass_diag, init.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tuner = StepTuner::new(cfg.step_size, cfg.tune_steps);
    let mut cur = State {
        theta: init.to_vec(),
        p: vec![0.0; init.len()],
        lp: lp0,
        grad: target.gradient(init),
    };
    let mut draws = vec![cur.theta.clone()];
    let mut log_post = vec![cur.lp];
    let mut moved = 0usize;
    let mut divergences = 0usize;
    let mut depth_sum = 0usize;
    let max_depth = cfg.max_tree_depth.max(1);

    for iter in 1..cfg.n_draws {
        cur.p = draw_momentum(&mut rng, &mass);
        let ctx = NutsCtx {
            target,
            mass_inv: &mass_inv,
            step: tuner.step,
            h0: -cur.lp + kinetic(&cur.p, &mass_inv),
            max_delta: cfg.divergence_threshold,
        };
        let mut minus = cur.clone();
        let mut plus = cur.clone();
        let mut proposal = cur.clone();
        let mut log_weight = 0.0;
        let mut accept_sum = 0.0;
        let mut n_steps = 0usize;
        let mut depth = 0;
        let mut diverged = false;
        while depth < max_depth {
            let direction = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let tree = if direction > 0.0 {
                ctx.build(&plus, direction, depth, &mut rng)
            } else {
                ctx.build(&minus, direction, depth, &mut rng)
            };
            depth += 1;
            accept_sum += tree.accept_sum;
            n_steps += tree.n_steps;
            diverged |= tree.diverged;
            if tree.stop {
                break;
            }
            if direction > 0.0 {
                plus = tree.plus;
            } else {
                minus = tree.minus;
            }
            // biased progressive sampling favours the newer subtree
            if rng.random::<f64>().ln() < tree.log_weight - log_weight {
                proposal = tree.proposal;
            }
            log_weight = log_add(log_weight, tree.log_weight);
            if !no_u_turn(&minus.theta, &plus.theta, &minus.p, &plus.p, &mass_inv) {
                break;
            }
        }
        depth_sum += depth;
        if diverged {
            divergences += 1;
        }
        if proposal.theta != cur.theta {
            moved += 1;
        }
        cur = proposal;
        tuner.update(iter, accept_sum / n_steps.max(1) as f64, cfg.target_accept);
        draws.push(cur.theta.clone());
        log_post.push(cur.lp);
    }
    Ok(Chain {
        draws,
        log_post,
        acceptance_rate: moved as f64 / (cfg.n_draws - 1).max(1) as f64,
        sampler: SamplerKind::Nuts,
        seed: cfg.seed,
        burn_in: cfg.burn_in,
        stats: ChainStats {
            divergences,
            final_step_size: Some(tuner.step),
            mean_tree_depth: Some(depth_sum as f64 / (cfg.n_draws - 1).max(1) as f64),
            ..Default::default()
        },
    })
}

/// Dispatches on the sampler configuration.
pub fn sample(target: &dyn LogTarget, init: &[f64], cfg: &SamplerConfig) -> Result<Chain> {
    match cfg {
        SamplerConfig::Am(c) => sample_am(target, init, c),
        SamplerConfig::Dram(c) => sample_dram(target, init, c),
        SamplerConfig::Hmc(c) => sample_hmc(target, init, c),
        SamplerConfig::Nuts(c) => sample_nuts(target, init, c),
    }
}

/// Independent chains in parallel, one per seed.
pub fn sample_chains(target: &dyn LogTarget, init: &[f64], cfg: &SamplerConfig, seeds: &[u64]) -> Result<Vec<Chain>> {
    seeds
        .par_iter()
        .map(|&s| sample(target, init, &cfg.clone().with_seed(s)))
        .collect()
}

/// Effective sample size of a single series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesEss {
    pub ess: f64,
    /// Integrated autocorrelation time `1 + 2Σρ_k`.
    pub iact: f64,
    pub degenerate: bool,
}

/// Integrated autocorrelation times below this are treated as pathological.
const MIN_IACT: f64 = 0.1;

/// ESS with Geyer's initial positive sequence truncation, capped at `N`.
pub fn ess_series(x: &[f64]) -> SeriesEss {
    let n = x.len();
    let mean = stats::mean(x);
    let c0 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if n < 2 || !(c0 > 0.0) || !c0.is_finite() {
        return SeriesEss {
            ess: 1.0,
            iact: f64::INFINITY,
            degenerate: true,
        };
    }
    let rho = |k: usize| -> f64 {
        if k >= n {
            return 0.0;
        }
        (0..n - k).map(|i| (x[i] - mean) * (x[i + k] - mean)).sum::<f64>() / (n as f64 * c0)
    };
    let mut tau = -1.0;
    let mut k = 0;
    while 2 * k + 1 < n {
        let gamma = rho(2 * k) + rho(2 * k + 1);
        if gamma <= 0.0 {
            break;
        }
        tau += 2.0 * gamma;
        k += 1;
    }
    let degenerate = tau < MIN_IACT;
    let ess = if degenerate { n as f64 } else { (n as f64 / tau).clamp(1.0, n as f64) };
    SeriesEss { ess, iact: tau, degenerate }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EssReport {
    pub ess: Vec<f64>,
    pub iact: Vec<f64>,
    pub degenerate: Vec<bool>,
}

/// Minimum post-burn-in length for ESS estimates.
pub const MIN_ESS_LENGTH: usize = 100;

pub fn ess(chain: &Chain, burn_in: usize) -> Result<EssReport> {
    let kept = chain.len().saturating_sub(burn_in);
    if kept < MIN_ESS_LENGTH {
        return Err(Error::Input(format!("ESS needs at least {MIN_ESS_LENGTH} post-burn-in draws, got {kept}")));
    }
    let per: Vec<SeriesEss> = (0..chain.dim())
        .into_par_iter()
        .map(|j| ess_series(&chain.draws[burn_in..].iter().map(|d| d[j]).collect::<Vec<_>>()))
        .collect();
    Ok(EssReport {
        ess: per.iter().map(|s| s.ess).collect(),
        iact: per.iter().map(|s| s.iact).collect(),
        degenerate: per.iter().map(|s| s.degenerate).collect(),
    })
}

/// Per-parameter convergence summary.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterDiagnostics {
    /// Autocorrelations at lags `0..=max_lag`.
    pub autocorrelation: Vec<f64>,
    pub first_half_mean: f64,
    pub second_half_mean: f64,
    /// Difference of half means in pooled standard errors.
    pub split_z: f64,
    pub nonstationary: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub parameters: Vec<ParameterDiagnostics>,
    /// Set when any parameter's split-half means disagree.
    pub nonstationary: bool,
}

pub const MIN_DIAGNOSTIC_LENGTH: usize = 200;
pub const DIAGNOSTIC_MAX_LAG: usize = 50;

/// Split-half stationarity check and autocorrelation table on the retained draws.
pub fn diagnostics(chain: &Chain) -> Result<Diagnostics> {
    let kept = chain.retained();
    if kept.len() < MIN_DIAGNOSTIC_LENGTH {
        return Err(Error::Input(format!(
            "diagnostics need at least {MIN_DIAGNOSTIC_LENGTH} post-burn-in draws, got {}",
            kept.len()
        )));
    }
    let parameters: Vec<ParameterDiagnostics> = (0..chain.dim())
        .map(|j| {
            let x: Vec<f64> = kept.iter().map(|d| d[j]).collect();
            let (a, b) = x.split_at(x.len() / 2);
            let se2 = |h: &[f64]| stats::variance(h) / ess_series(h).ess;
            let se = (se2(a) + se2(b)).sqrt();
            let diff = stats::mean(a) - stats::mean(b);
            let split_z = if se > 0.0 {
                diff / se
            } else if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            ParameterDiagnostics {
                autocorrelation: stats::autocorrelation(&x, DIAGNOSTIC_MAX_LAG.min(x.len() - 1)),
                first_half_mean: stats::mean(a),
                second_half_mean: stats::mean(b),
                split_z,
                nonstationary: split_z.abs() > 3.0,
            }
        })
        .collect();
    let nonstationary = parameters.iter().any(|p| p.nonstationary);
    Ok(Diagnostics { parameters, nonstationary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    struct Zero(usize);
    impl LogLikelihood for Zero {
        fn dim(&self) -> usize {
            self.0
        }
        fn log_likelihood(&self, _: &[f64]) -> f64 {
            0.0
        }
    }

    struct Gaussian {
        mean: Vec<f64>,
        prec: DMatrix<f64>,
    }

    impl Gaussian {
        fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Self {
            Self {
                mean,
                prec: cov.try_inverse().unwrap(),
            }
        }
    }

    impl LogTarget for Gaussian {
        fn dim(&self) -> usize {
            self.mean.len()
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            let d = DVector::from_iterator(x.len(), x.iter().zip(&self.mean).map(|(a, b)| a - b));
            -0.5 * (d.transpose() * &self.prec * &d)[(0, 0)]
        }
        fn gradient(&self, x: &[f64]) -> Vec<f64> {
            let d = DVector::from_iterator(x.len(), x.iter().zip(&self.mean).map(|(a, b)| a - b));
            (-(&self.prec * d)).iter().copied().collect()
        }
    }

    struct Point;
    impl LogTarget for Point {
        fn dim(&self) -> usize {
            1
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            if x[0] == 0.5 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }
        fn gradient(&self, _: &[f64]) -> Vec<f64> {
            vec![0.0]
        }
    }

    fn std_normal() -> Gaussian {
        Gaussian::new(vec![0.0], DMatrix::identity(1, 1))
    }

    fn moments(chain: &Chain) -> (f64, f64) {
        let t = chain.trace(0);
        (stats::mean(&t), stats::std_dev(&t))
    }

    #[test]
    fn prior_only_posterior() {
        let lp = LogPosterior::new(PriorSpec::new(vec![0.3, -1.0], vec![1.0, 1.0]).unwrap(), Zero(2)).unwrap();
        assert_relative_eq!(lp.log_posterior(&[0.3, -1.0]), -(2.0 * PI).ln(), max_relative = 1e-14);
        assert!(lp.log_posterior(&[0.4, -1.0]) < lp.log_posterior(&[0.3, -1.0]));
        assert!(PriorSpec::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn am_standard_normal_moments() {
        let cfg = AmConfig {
            n_draws: 20000,
            burn_in: 2000,
            init_cov_scale: 1.0,
            seed: 11,
            ..Default::default()
        };
        let chain = sample_am(&std_normal(), &[0.0], &cfg).unwrap();
        let (m, s) = moments(&chain);
        assert!(m.abs() < 0.05, "{m}");
        assert!((s - 1.0).abs() < 0.05, "{s}");
        assert_eq!(chain.draws[0], vec![0.0]);
    }

    #[test]
    fn am_stuck_on_point_mass() {
        let cfg = AmConfig {
            n_draws: 300,
            burn_in: 10,
            ..Default::default()
        };
        let chain = sample_am(&Point, &[0.5], &cfg).unwrap();
        assert!(chain.draws.iter().all(|d| d[0] == 0.5));
        assert_eq!(chain.acceptance_rate, 0.0);
        let dram = sample_dram(&Point, &[0.5], &DramConfig { am: cfg, stage2_scale: 0.2 }).unwrap();
        assert_eq!(dram.acceptance_rate, 0.0);
    }

    #[test]
    fn dram_reduces_to_am_without_rejections() {
        struct Flat;
        impl LogTarget for Flat {
            fn dim(&self) -> usize {
                2
            }
            fn log_density(&self, _: &[f64]) -> f64 {
                0.0
            }
        }
        let am = AmConfig {
            n_draws: 500,
            burn_in: 100,
            seed: 5,
            ..Default::default()
        };
        let a = sample_am(&Flat, &[0.0, 0.0], &am).unwrap();
        let d = sample_dram(&Flat, &[0.0, 0.0], &DramConfig { am, stage2_scale: 1.0 }).unwrap();
        assert_eq!(a.draws, d.draws);
        assert_eq!(a.acceptance_rate, 1.0);
    }

    #[test]
    fn non_finite_init_rejected() {
        assert_eq!(sample_am(&Point, &[0.0], &AmConfig::default()), Err(Error::NonFiniteInit));
    }

    #[test]
    fn log_post_matches_reevaluation() {
        let target = Gaussian::new(vec![1.0, -1.0], DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]));
        for cfg in [
            SamplerConfig::Am(AmConfig {
                n_draws: 400,
                burn_in: 100,
                ..Default::default()
            }),
            SamplerConfig::Dram(DramConfig {
                am: AmConfig {
                    n_draws: 400,
                    burn_in: 100,
                    ..Default::default()
                },
                ..Default::default()
            }),
            SamplerConfig::Hmc(HmcConfig {
                n_draws: 200,
                burn_in: 50,
                ..Default::default()
            }),
            SamplerConfig::Nuts(NutsConfig {
                n_draws: 200,
                burn_in: 50,
                ..Default::default()
            }),
        ] {
            let chain = sample(&target, &[0.0, 0.0], &cfg).unwrap();
            for (d, lp) in chain.draws.iter().zip(&chain.log_post) {
                assert!((target.log_density(d) - lp).abs() < 1e-10);
            }
            let again = sample(&target, &[0.0, 0.0], &cfg).unwrap();
            assert_eq!(chain, again);
        }
    }

    #[test]
    fn hmc_zero_leapfrog_always_accepts() {
        let cfg = HmcConfig {
            n_leapfrog: 0,
            n_draws: 100,
            burn_in: 10,
            ..Default::default()
        };
        let chain = sample_hmc(&std_normal(), &[0.7], &cfg).unwrap();
        assert_eq!(chain.acceptance_rate, 1.0);
        assert!(chain.draws.iter().all(|d| d[0] == 0.7));
    }

    #[test]
    fn leapfrog_is_second_order() {
        let target = Gaussian::new(vec![0.0, 0.0], DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]));
        let h = 0.1;
        let e1 = energy_error(&target, &[1.0, -0.5], &[0.3, 0.8], h, 10, &[1.0, 1.0]).unwrap();
        let e2 = energy_error(&target, &[1.0, -0.5], &[0.3, 0.8], h / 2.0, 20, &[1.0, 1.0]).unwrap();
        let ratio = e1.abs() / e2.abs();
        assert!(ratio > 3.0 && ratio < 5.0, "{ratio}");
    }

    #[test]
    fn hmc_standard_normal_moments() {
        let cfg = HmcConfig {
            n_draws: 10000,
            burn_in: 500,
            step_size: 0.1,
            n_leapfrog: 20,
            tune_steps: 0,
            seed: 2,
            ..Default::default()
        };
        let chain = sample_hmc(&std_normal(), &[0.0], &cfg).unwrap();
        let (m, s) = moments(&chain);
        let n_eff = ess_series(&chain.trace(0)).ess;
        assert!(m.abs() < 3.0 / n_eff.sqrt(), "{m} {n_eff}");
        assert!((s - 1.0).abs() < 3.0 / (2.0 * n_eff).sqrt(), "{s}");
    }

    #[test]
    fn nuts_standard_normal_moments() {
        let cfg = NutsConfig {
            n_draws: 4000,
            burn_in: 400,
            seed: 4,
            ..Default::default()
        };
        let chain = sample_nuts(&std_normal(), &[0.0], &cfg).unwrap();
        let (m, s) = moments(&chain);
        let n_eff = ess_series(&chain.trace(0)).ess;
        assert!(m.abs() < 3.0 / n_eff.sqrt(), "{m} {n_eff}");
        assert!((s - 1.0).abs() < 3.0 / (2.0 * n_eff).sqrt() + 0.02, "{s}");
    }

    #[test]
    fn nuts_depth_zero_is_single_step() {
        let cfg = NutsConfig {
            n_draws: 6000,
            burn_in: 1000,
            max_tree_depth: 0,
            step_size: 0.8,
            tune_steps: 0,
            seed: 8,
            ..Default::default()
        };
        let chain = sample_nuts(&std_normal(), &[0.0], &cfg).unwrap();
        assert_eq!(chain.stats.mean_tree_depth, Some(1.0));
        let (m, s) = moments(&chain);
        assert!(m.abs() < 0.15 && (s - 1.0).abs() < 0.15, "{m} {s}");
    }

    #[test]
    fn u_turn_criterion() {
        // one doubling in a pure translation reverses when momenta oppose the span
        assert!(no_u_turn(&[0.0], &[1.0], &[1.0], &[1.0], &[1.0]));
        assert!(!no_u_turn(&[0.0], &[1.0], &[1.0], &[-1.0], &[1.0]));
        assert!(!no_u_turn(&[0.0], &[1.0], &[-1.0], &[1.0], &[1.0]));
    }

    fn ar1(n: usize, phi: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = vec![0.0; n];
        for i in 1..n {
            x[i] = phi * x[i - 1] + rng.sample::<f64, _>(StandardNormal);
        }
        x
    }

    #[test]
    fn ess_of_iid_and_ar1() {
        let iid = ar1(10000, 0.0, 3);
        let e = ess_series(&iid);
        assert!(e.ess >= 8000.0 && e.ess <= 10000.0, "{e:?}");
        let e = ess_series(&ar1(20000, 0.9, 4));
        assert!(e.ess >= 700.0 && e.ess <= 1500.0, "{e:?}");
    }

    #[test]
    fn ess_degenerate_inputs() {
        let constant = ess_series(&[2.0; 200]);
        assert_eq!(constant.ess, 1.0);
        assert!(constant.degenerate);
        let alternating: Vec<f64> = (0..200).map(|i| (i % 2) as f64).collect();
        let alt = ess_series(&alternating);
        assert!(alt.degenerate);
        assert_eq!(alt.ess, 200.0);
    }

    fn chain_from(values: Vec<f64>) -> Chain {
        Chain {
            log_post: vec![0.0; values.len()],
            draws: values.into_iter().map(|v| vec![v]).collect(),
            acceptance_rate: 1.0,
            sampler: SamplerKind::Am,
            seed: 0,
            burn_in: 0,
            stats: ChainStats::default(),
        }
    }

    #[test]
    fn diagnostics_flags() {
        let iid = diagnostics(&chain_from(ar1(4000, 0.0, 9))).unwrap();
        assert!(!iid.nonstationary);
        let trend = diagnostics(&chain_from((0..1000).map(|i| i as f64 * 0.01).collect())).unwrap();
        assert!(trend.nonstationary);
        let ar = diagnostics(&chain_from(ar1(20000, 0.9, 6))).unwrap();
        assert!((ar.parameters[0].autocorrelation[1] - 0.9).abs() < 0.05);
        assert!(diagnostics(&chain_from(vec![0.0; 100])).is_err());
    }

    #[test]
    fn parallel_chains_match_serial() {
        let cfg = SamplerConfig::Am(AmConfig {
            n_draws: 300,
            burn_in: 50,
            ..Default::default()
        });
        let chains = sample_chains(&std_normal(), &[0.0], &cfg, &[1, 2]).unwrap();
        assert_eq!(chains[1], sample(&std_normal(), &[0.0], &cfg.clone().with_seed(2)).unwrap());
        assert_ne!(chains[0].draws, chains[1].draws);
    }
}

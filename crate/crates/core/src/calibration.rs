//! Deterministic kernel calibration.
//!
//! Two data likelihoods are provided: the Gaussian-process marginal applied to
//! binary labels, and a Gaussian regression of the labels on K-PCA scores. Both
//! are maximized over log-parameters by [`calibrate`] with one of four
//! optimizers. The same likelihoods feed the Bayesian stage in [`crate::mcmc`].

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{gram_from_rows, rows, Kernel, KernelParams, KernelSpec};
use crate::kpca::{fit_kpca_rows, RetainPolicy};

/// A log-likelihood over a flat log-parameter vector.
///
/// Failures (invalid parameters, failed factorizations) are reported as
/// `f64::NEG_INFINITY` so optimizers and samplers can simply reject them.
pub trait LogLikelihood: Send + Sync {
    fn dim(&self) -> usize;

    fn log_likelihood(&self, theta: &[f64]) -> f64;

    /// Number of data points behind the likelihood; zero for data-free targets.
    fn n_samples(&self) -> usize {
        0
    }

    /// Likelihood restricted to a subset of the data points.
    fn log_likelihood_subset(&self, theta: &[f64], _idx: &[usize]) -> f64 {
        self.log_likelihood(theta)
    }

    /// Kernel Flows loss `ρ` comparing a sub-batch to its batch. `None` when the
    /// likelihood has no data to split.
    fn kernel_flows_loss(&self, _theta: &[f64], _batch: &[usize], _sub: &[usize]) -> Option<f64> {
        None
    }
}

impl<T: LogLikelihood + ?Sized> LogLikelihood for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_likelihood(&self, theta: &[f64]) -> f64 {
        (**self).log_likelihood(theta)
    }
    fn n_samples(&self) -> usize {
        (**self).n_samples()
    }
    fn log_likelihood_subset(&self, theta: &[f64], idx: &[usize]) -> f64 {
        (**self).log_likelihood_subset(theta, idx)
    }
    fn kernel_flows_loss(&self, theta: &[f64], batch: &[usize], sub: &[usize]) -> Option<f64> {
        (**self).kernel_flows_loss(theta, batch, sub)
    }
}

/// Cholesky factor of a symmetric positive-definite matrix. Tries the matrix as
/// given, then adds diagonal jitter from `1e-10·tr/n` up to `1e-4·tr/n`.
pub fn spd_factor(c: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(ch) = Cholesky::new(c.clone()) {
        return Ok(ch);
    }
    let n = c.nrows();
    let base = c.trace() / n as f64;
    let mut tried = Vec::new();
    let mut level = 1e-10;
    while level <= 1e-4 * (1.0 + 1e-9) {
        let jitter = level * base;
        tried.push(jitter);
        let mut cj = c.clone();
        for i in 0..n {
            cj[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(cj) {
            return Ok(ch);
        }
        level *= 10.0;
    }
    Err(Error::Factorization { jitters: tried })
}

fn noisy_gram<K: Kernel + ?Sized>(kernel: &K, noise_var: f64, x: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let mut c = gram_from_rows(kernel, x)?;
    for i in 0..x.len() {
        c[(i, i)] += noise_var;
    }
    Ok(c)
}

fn gp_log_marginal_rows(spec: &KernelSpec, params: &KernelParams, x: &[Vec<f64>], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            got: y.len(),
            context: "label vector",
        });
    }
    let kernel = spec.build(params)?;
    let c = noisy_gram(&kernel, params.noise_var(), x)?;
    let ch = spd_factor(&c)?;
    let yv = DVector::from_column_slice(y);
    let alpha = ch.solve(&yv);
    let log_det: f64 = 2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let n = y.len() as f64;
    Ok(-0.5 * yv.dot(&alpha) - 0.5 * log_det - 0.5 * n * (2.0 * PI).ln())
}

/// `-½ yᵀC⁻¹y - ½ log|C| - (n/2) log 2π` with `C = K + s_n² I`.
pub fn gp_log_marginal(spec: &KernelSpec, params: &KernelParams, x: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
    gp_log_marginal_rows(spec, params, &rows(x), y)
}

/// `yᵀ C⁻¹ y`, the squared RKHS norm of the (noisy) interpolant.
fn interpolant_norm(spec: &KernelSpec, params: &KernelParams, x: &[Vec<f64>], y: &[f64]) -> Result<f64> {
    let kernel = spec.build(params)?;
    let ch = spd_factor(&noisy_gram(&kernel, params.noise_var(), x)?)?;
    let yv = DVector::from_column_slice(y);
    Ok(yv.dot(&ch.solve(&yv)))
}

/// Canonical Kernel Flows loss `1 - ‖u_sub‖² / ‖u_batch‖²`.
fn kernel_flows_rho(spec: &KernelSpec, theta: &[f64], x: &[Vec<f64>], y: &[f64], batch: &[usize], sub: &[usize]) -> Option<f64> {
    let params = KernelParams::from_theta(spec, theta).ok()?;
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
        (idx.iter().map(|&i| x[i].clone()).collect(), idx.iter().map(|&i| y[i]).collect())
    };
    let (xb, yb) = pick(batch);
    let (xs, ys) = pick(sub);
    let nb = interpolant_norm(spec, &params, &xb, &yb).ok()?;
    let ns = interpolant_norm(spec, &params, &xs, &ys).ok()?;
    if nb <= 0.0 {
        return Some(0.0);
    }
    Some(1.0 - ns / nb)
}

fn validate_xy(spec: &KernelSpec, x: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if x.ncols() != spec.dim {
        return Err(Error::Dimension {
            expected: spec.dim,
            got: x.ncols(),
            context: "calibration data columns",
        });
    }
    if x.nrows() != y.len() {
        return Err(Error::Dimension {
            expected: x.nrows(),
            got: y.len(),
            context: "label vector",
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("calibration data"));
    }
    Ok(())
}

fn check_binary(y: &[f64]) -> Result<()> {
    if y.iter().all(|v| *v == 0.0 || *v == 1.0) {
        Ok(())
    } else {
        Err(Error::Input("labels must be 0 or 1".into()))
    }
}

/// GP marginal likelihood of labels (or any real targets) given inputs.
#[derive(Debug, Clone)]
pub struct GpMarginalObjective {
    spec: KernelSpec,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
}

impl GpMarginalObjective {
    pub fn new(spec: KernelSpec, x: &DMatrix<f64>, y: &[f64]) -> Result<Self> {
        validate_xy(&spec, x, y)?;
        Ok(Self {
            spec,
            x: rows(x),
            y: y.to_vec(),
        })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }
}

impl LogLikelihood for GpMarginalObjective {
    fn dim(&self) -> usize {
        self.spec.n_params()
    }

    fn log_likelihood(&self, theta: &[f64]) -> f64 {
        KernelParams::from_theta(&self.spec, theta)
            .and_then(|p| gp_log_marginal_rows(&self.spec, &p, &self.x, &self.y))
            .unwrap_or(f64::NEG_INFINITY)
    }

    fn n_samples(&self) -> usize {
        self.y.len()
    }

    fn log_likelihood_subset(&self, theta: &[f64], idx: &[usize]) -> f64 {
        let x: Vec<Vec<f64>> = idx.iter().map(|&i| self.x[i].clone()).collect();
        let y: Vec<f64> = idx.iter().map(|&i| self.y[i]).collect();
        KernelParams::from_theta(&self.spec, theta)
            .and_then(|p| gp_log_marginal_rows(&self.spec, &p, &x, &y))
            .unwrap_or(f64::NEG_INFINITY)
    }

    fn kernel_flows_loss(&self, theta: &[f64], batch: &[usize], sub: &[usize]) -> Option<f64> {
        kernel_flows_rho(&self.spec, theta, &self.x, &self.y, batch, sub)
    }
}

/// Outcome of a K-PCR likelihood evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct KpcrFit {
    pub log_likelihood: f64,
    pub beta: Vec<f64>,
    pub residual_ss: f64,
    /// Residual sd used in the density (supplied or estimated).
    pub sigma: f64,
    pub n_components: usize,
    /// The score normal equations were singular and a pseudo-inverse was used.
    pub used_pseudo_inverse: bool,
}

/// Smallest residual sd accepted when it is estimated from the fit.
pub const MIN_RESIDUAL_SD: f64 = 1e-8;

fn kpcr_rows(
    spec: &KernelSpec,
    params: &KernelParams,
    x: &[Vec<f64>],
    y: &[f64],
    policy: RetainPolicy,
    sigma: Option<f64>,
) -> Result<KpcrFit> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: y.len(),
            context: "label vector",
        });
    }
    let model = fit_kpca_rows(x.to_vec(), spec.build(params)?, policy)?;
    let t = model.training_scores();
    let r = t.ncols();
    let yv = DVector::from_column_slice(y);

    let (beta, used_pinv) = if r == 0 {
        (DVector::zeros(0), false)
    } else {
        let tty = t.transpose() * &yv;
        match Cholesky::new(t.transpose() * &t) {
            Some(ch) => (ch.solve(&tty), false),
            None => {
                let pinv = t
                    .clone()
                    .pseudo_inverse(1e-12)
                    .map_err(|e| Error::Degenerate(e.to_string()))?;
                (pinv * &yv, true)
            }
        }
    };
    let resid = &yv - &t * &beta;
    let rss = resid.norm_squared();
    let sigma = match sigma {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => return Err(Error::Input(format!("residual sd must be positive, got {s}"))),
        None => (rss / (n - r).max(1) as f64).sqrt().max(MIN_RESIDUAL_SD),
    };
    let s2 = sigma * sigma;
    let log_likelihood = -rss / (2.0 * s2) - 0.5 * n as f64 * (2.0 * PI * s2).ln();
    Ok(KpcrFit {
        log_likelihood,
        beta: beta.iter().copied().collect(),
        residual_ss: rss,
        sigma,
        n_components: r,
        used_pseudo_inverse: used_pinv,
    })
}

/// Gaussian log-density of labels regressed (least squares, no intercept) on
/// the K-PCA training scores.
pub fn kpcr_log_likelihood(
    spec: &KernelSpec,
    params: &KernelParams,
    x: &DMatrix<f64>,
    y: &[f64],
    policy: RetainPolicy,
    sigma: Option<f64>,
) -> Result<KpcrFit> {
    kpcr_rows(spec, params, &rows(x), y, policy, sigma)
}

#[derive(Debug, Clone)]
pub struct KpcrObjective {
    spec: KernelSpec,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    policy: RetainPolicy,
    sigma: Option<f64>,
}

impl KpcrObjective {
    pub fn new(spec: KernelSpec, x: &DMatrix<f64>, y: &[f64], policy: RetainPolicy, sigma: Option<f64>) -> Result<Self> {
        validate_xy(&spec, x, y)?;
        Ok(Self {
            spec,
            x: rows(x),
            y: y.to_vec(),
            policy,
            sigma,
        })
    }

    pub fn with_sigma(mut self, sigma: Option<f64>) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn fit(&self, theta: &[f64]) -> Result<KpcrFit> {
        let params = KernelParams::from_theta(&self.spec, theta)?;
        kpcr_rows(&self.spec, &params, &self.x, &self.y, self.policy, self.sigma)
    }
}

impl LogLikelihood for KpcrObjective {
    fn dim(&self) -> usize {
        self.spec.n_params()
    }

    fn log_likelihood(&self, theta: &[f64]) -> f64 {
        self.fit(theta).map(|f| f.log_likelihood).unwrap_or(f64::NEG_INFINITY)
    }

    fn n_samples(&self) -> usize {
        self.y.len()
    }

    fn log_likelihood_subset(&self, theta: &[f64], idx: &[usize]) -> f64 {
        let x: Vec<Vec<f64>> = idx.iter().map(|&i| self.x[i].clone()).collect();
        let y: Vec<f64> = idx.iter().map(|&i| self.y[i]).collect();
        KernelParams::from_theta(&self.spec, theta)
            .and_then(|p| kpcr_rows(&self.spec, &p, &x, &y, self.policy, self.sigma))
            .map(|f| f.log_likelihood)
            .unwrap_or(f64::NEG_INFINITY)
    }

    fn kernel_flows_loss(&self, theta: &[f64], batch: &[usize], sub: &[usize]) -> Option<f64> {
        kernel_flows_rho(&self.spec, theta, &self.x, &self.y, batch, sub)
    }
}

/// The supervised calibration objectives.
#[derive(Debug, Clone)]
pub enum CalibrationObjective {
    GpMarginal(GpMarginalObjective),
    KpcrDiscrimination(KpcrObjective),
}

impl CalibrationObjective {
    /// GP-marginal surrogate on binary labels.
    pub fn gp_marginal(spec: KernelSpec, x: &DMatrix<f64>, y: &[f64]) -> Result<Self> {
        check_binary(y)?;
        Ok(Self::GpMarginal(GpMarginalObjective::new(spec, x, y)?))
    }

    pub fn kpcr(spec: KernelSpec, x: &DMatrix<f64>, y: &[f64], policy: RetainPolicy, sigma: Option<f64>) -> Result<Self> {
        check_binary(y)?;
        Ok(Self::KpcrDiscrimination(KpcrObjective::new(spec, x, y, policy, sigma)?))
    }

    fn inner(&self) -> &dyn LogLikelihood {
        match self {
            Self::GpMarginal(o) => o,
            Self::KpcrDiscrimination(o) => o,
        }
    }
}

impl LogLikelihood for CalibrationObjective {
    fn dim(&self) -> usize {
        self.inner().dim()
    }
    fn log_likelihood(&self, theta: &[f64]) -> f64 {
        self.inner().log_likelihood(theta)
    }
    fn n_samples(&self) -> usize {
        self.inner().n_samples()
    }
    fn log_likelihood_subset(&self, theta: &[f64], idx: &[usize]) -> f64 {
        self.inner().log_likelihood_subset(theta, idx)
    }
    fn kernel_flows_loss(&self, theta: &[f64], batch: &[usize], sub: &[usize]) -> Option<f64> {
        self.inner().kernel_flows_loss(theta, batch, sub)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerMethod {
    Lbfgs,
    NelderMead,
    GeneticAlgorithm,
    KernelFlows,
}

impl OptimizerMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Lbfgs => "lbfgs",
            Self::NelderMead => "nelder-mead",
            Self::GeneticAlgorithm => "ga",
            Self::KernelFlows => "kernel-flows",
        }
    }
}

impl std::str::FromStr for OptimizerMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lbfgs" | "l-bfgs" => Ok(Self::Lbfgs),
            "nm" | "nelder-mead" | "neldermead" => Ok(Self::NelderMead),
            "ga" | "genetic" => Ok(Self::GeneticAlgorithm),
            "kf" | "kernel-flows" | "kernelflows" => Ok(Self::KernelFlows),
            other => Err(Error::Input(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub method: OptimizerMethod,
    /// Iterations (L-BFGS, Nelder–Mead, Kernel Flows) or generations (GA).
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    /// Central-difference step in log-parameter space.
    pub fd_step: f64,
    pub lbfgs_memory: usize,
    pub simplex_scale: f64,
    pub population: usize,
    pub tournament: usize,
    pub mutation_sd: f64,
    pub crossover_rate: f64,
    /// Spread of the initial GA population around the starting point.
    pub init_spread: f64,
    pub kf_batch_fraction: f64,
    pub kf_step: f64,
    /// GA / Kernel Flows stop once the best loss stalls for this many iterations.
    pub patience: usize,
}

impl OptimizerConfig {
    pub fn new(method: OptimizerMethod) -> Self {
        let max_iters = match method {
            OptimizerMethod::Lbfgs => 200,
            OptimizerMethod::NelderMead => 1000,
            OptimizerMethod::GeneticAlgorithm => 100,
            OptimizerMethod::KernelFlows => 200,
        };
        Self {
            method,
            max_iters,
            tol: 1e-8,
            seed: 0,
            fd_step: 1e-5,
            lbfgs_memory: 10,
            simplex_scale: 0.5,
            population: 30,
            tournament: 3,
            mutation_sd: 0.1,
            crossover_rate: 0.7,
            init_spread: 0.5,
            kf_batch_fraction: 0.5,
            kf_step: 0.1,
            patience: 30,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        let ok = self.max_iters > 0
            && self.tol > 0.0
            && self.fd_step > 0.0
            && self.lbfgs_memory > 0
            && self.simplex_scale > 0.0
            && self.population >= 2
            && self.tournament > 0
            && self.mutation_sd > 0.0
            && self.crossover_rate >= 0.0
            && self.crossover_rate <= 1.0
            && self.init_spread > 0.0
            && self.kf_batch_fraction > 0.0
            && self.kf_batch_fraction <= 1.0
            && self.kf_step > 0.0
            && self.patience > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub theta_hat: Vec<f64>,
    /// Log-likelihood at `theta_hat`.
    pub log_likelihood: f64,
    /// Loss (negative log-likelihood) per iteration; best-so-far for GA and
    /// Kernel Flows.
    pub loss_trace: Vec<f64>,
    pub wall_time: f64,
    pub converged: bool,
    pub evaluations: usize,
}

impl CalibrationResult {
    pub fn params(&self, spec: &KernelSpec) -> Result<KernelParams> {
        KernelParams::from_theta(spec, &self.theta_hat)
    }
}

struct Loss<'a> {
    objective: &'a dyn LogLikelihood,
    evals: std::sync::atomic::AtomicUsize,
}

impl<'a> Loss<'a> {
    fn eval(&self, theta: &[f64]) -> f64 {
        self.evals.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let v = -self.objective.log_likelihood(theta);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

/// Central finite-difference gradient, probes evaluated in parallel.
pub fn fd_gradient<F>(f: F, theta: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    (0..theta.len())
        .into_par_iter()
        .map(|d| {
            let mut plus = theta.to_vec();
            let mut minus = theta.to_vec();
            plus[d] += step;
            minus[d] -= step;
            (f(&plus) - f(&minus)) / (2.0 * step)
        })
        .collect()
}

/// Maximizes the objective over log-parameters starting from `init`.
pub fn calibrate(objective: &dyn LogLikelihood, config: &OptimizerConfig, init: &[f64]) -> Result<CalibrationResult> {
    config.validate()?;
    if init.len() != objective.dim() {
        return Err(Error::Dimension {
            expected: objective.dim(),
            got: init.len(),
            context: "initial log-parameters",
        });
    }
    let loss = Loss {
        objective,
        evals: Default::default(),
    };
    let f0 = loss.eval(init);
    if !f0.is_finite() {
        return Err(Error::NonFiniteInit);
    }
    let start = Instant::now();
    let mut out = match config.method {
        OptimizerMethod::Lbfgs => lbfgs(&loss, config, init, f0),
        OptimizerMethod::NelderMead => nelder_mead(&loss, config, init, f0),
        OptimizerMethod::GeneticAlgorithm => genetic(&loss, config, init, f0),
        OptimizerMethod::KernelFlows => kernel_flows(&loss, config, init, f0),
    };
    out.wall_time = start.elapsed().as_secs_f64();
    out.evaluations = loss.evals.load(std::sync::atomic::Ordering::Relaxed);
    Ok(out)
}

fn finish(theta: Vec<f64>, best: f64, trace: Vec<f64>, converged: bool) -> CalibrationResult {
    CalibrationResult {
        theta_hat: theta,
        log_likelihood: -best,
        loss_trace: trace,
        wall_time: 0.0,
        converged,
        evaluations: 0,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn lbfgs(loss: &Loss, cfg: &OptimizerConfig, init: &[f64], f0: f64) -> CalibrationResult {
    let grad = |x: &[f64]| fd_gradient(|t| loss.eval(t), x, cfg.fd_step);
    let mut x = init.to_vec();
    let mut f = f0;
    let mut g = grad(&x);
    let mut trace = vec![f];
    let mut mem: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut converged = inf_norm(&g) < cfg.tol;

    for _ in 0..cfg.max_iters {
        if converged || g.iter().any(|v| !v.is_finite()) {
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = mem
            .last()
            .map(|(s, y, _)| dot(s, y) / dot(y, y))
            .unwrap_or_else(|| 1.0 / inf_norm(&g).max(1.0));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            mem.clear();
            dir = g.iter().map(|v| -v / inf_norm(&g).max(1.0)).collect();
            slope = dot(&g, &dir);
        }

        // backtracking Armijo search
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            let ft = loss.eval(&trial);
            if ft.is_finite() && ft <= f + 1e-4 * step * slope {
                accepted = Some((trial, ft));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            break;
        };
        let g_new = grad(&x_new);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if mem.len() == cfg.lbfgs_memory {
                mem.remove(0);
            }
            mem.push((s, y, 1.0 / sy));
        }
        let df = f - f_new;
        x = x_new;
        f = f_new;
        g = g_new;
        trace.push(f);
        converged = inf_norm(&g) < cfg.tol.sqrt() * (1.0 + f.abs()) * 1e-2 || df.abs() <= cfg.tol * (1.0 + f.abs());
    }
    finish(x, f, trace, converged)
}

fn nelder_mead(loss: &Loss, cfg: &OptimizerConfig, init: &[f64], f0: f64) -> CalibrationResult {
    let m = init.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(init.to_vec(), f0)];
    for d in 0..m {
        let mut v = init.to_vec();
        v[d] += cfg.simplex_scale;
        let fv = loss.eval(&v);
        simplex.push((v, fv));
    }
    let order = |s: &mut Vec<(Vec<f64>, f64)>| s.sort_by(|a, b| a.1.total_cmp(&b.1));
    order(&mut simplex);
    let mut trace = vec![simplex[0].1];
    let mut converged = false;

    let lerp = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect() };

    for _ in 0..cfg.max_iters {
        let best = simplex[0].1;
        let worst = simplex[m].1;
        let diameter = simplex[1..]
            .iter()
            .map(|(v, _)| inf_norm(&v.iter().zip(&simplex[0].0).map(|(a, b)| a - b).collect::<Vec<_>>()))
            .fold(0.0, f64::max);
        if (worst - best).abs() <= cfg.tol && diameter <= cfg.tol.sqrt() {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..m)
            .map(|d| simplex[..m].iter().map(|(v, _)| v[d]).sum::<f64>() / m as f64)
            .collect();
        let worst_pt = simplex[m].0.clone();
        let reflected = lerp(&centroid, &worst_pt, -1.0);
        let fr = loss.eval(&reflected);
        if fr < simplex[0].1 {
            let expanded = lerp(&centroid, &worst_pt, -2.0);
            let fe = loss.eval(&expanded);
            simplex[m] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[m - 1].1 {
            simplex[m] = (reflected, fr);
        } else {
            let (contracted, fc) = if fr < worst {
                let c = lerp(&centroid, &worst_pt, -0.5);
                let fc = loss.eval(&c);
                (c, fc)
            } else {
                let c = lerp(&centroid, &worst_pt, 0.5);
                let fc = loss.eval(&c);
                (c, fc)
            };
            if fc < fr.min(worst) {
                simplex[m] = (contracted, fc);
            } else {
                let anchor = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    let v = lerp(&anchor, &vertex.0, 0.5);
                    let fv = loss.eval(&v);
                    *vertex = (v, fv);
                }
            }
        }
        order(&mut simplex);
        trace.push(simplex[0].1);
    }
    let (x, f) = simplex.swap_remove(0);
    finish(x, f, trace, converged)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn genetic(loss: &Loss, cfg: &OptimizerConfig, init: &[f64], f0: f64) -> CalibrationResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = init.len();
    let mut pop: Vec<Vec<f64>> = vec![init.to_vec()];
    while pop.len() < cfg.population {
        pop.push(init.iter().map(|v| v + cfg.init_spread * normal(&mut rng)).collect());
    }
    let mut fit: Vec<f64> = std::iter::once(f0)
        .chain(pop[1..].par_iter().map(|p| loss.eval(p)).collect::<Vec<_>>())
        .collect();

    let argmin = |f: &[f64]| (0..f.len()).min_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
    let mut best = argmin(&fit);
    let mut best_x = pop[best].clone();
    let mut best_f = fit[best];
    let mut trace = vec![best_f];
    let mut stall = 0;
    let mut converged = false;

    for _ in 0..cfg.max_iters {
        let tournament = |rng: &mut ChaCha8Rng, fit: &[f64]| {
            let mut pick = rng.random_range(0..fit.len());
            for _ in 1..cfg.tournament {
                let c = rng.random_range(0..fit.len());
                if fit[c] < fit[pick] {
                    pick = c;
                }
            }
            pick
        };
        let mut children = Vec::with_capacity(cfg.population - 1);
        for _ in 1..cfg.population {
            let a = tournament(&mut rng, &fit);
            let b = tournament(&mut rng, &fit);
            let mut child: Vec<f64> = if rng.random::<f64>() < cfg.crossover_rate {
                (0..m)
                    .map(|d| {
                        let u: f64 = rng.random();
                        u * pop[a][d] + (1.0 - u) * pop[b][d]
                    })
                    .collect()
            } else {
                pop[a].clone()
            };
            for g in child.iter_mut() {
                *g += cfg.mutation_sd * normal(&mut rng);
            }
            children.push(child);
        }
        let child_fit: Vec<f64> = children.par_iter().map(|c| loss.eval(c)).collect();
        // elitism: the best individual survives unchanged
        pop = std::iter::once(pop[best].clone()).chain(children).collect();
        fit = std::iter::once(fit[best]).chain(child_fit).collect();
        best = argmin(&fit);
        let improvement = best_f - fit[best];
        if fit[best] < best_f {
            best_f = fit[best];
            best_x = pop[best].clone();
        }
        trace.push(best_f);
        stall = if improvement > cfg.tol { 0 } else { stall + 1 };
        if stall >= cfg.patience {
            converged = true;
            break;
        }
    }
    finish(best_x, best_f, trace, converged)
}

fn kernel_flows(loss: &Loss, cfg: &OptimizerConfig, init: &[f64], f0: f64) -> CalibrationResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = loss.objective.n_samples();
    let mut theta = init.to_vec();
    let mut best_x = theta.clone();
    let mut best_f = f0;
    let mut trace = vec![f0];
    let mut stall = 0;
    let mut converged = false;
    let all: Vec<usize> = (0..n).collect();

    for _ in 0..cfg.max_iters {
        let grad = if n >= 4 {
            let nb = ((cfg.kf_batch_fraction * n as f64).round() as usize).clamp(4, n);
            let mut perm = all.clone();
            perm.shuffle(&mut rng);
            let mut batch = perm[..nb].to_vec();
            batch.sort_unstable();
            // the batch is a shuffled prefix, so its first half is a random sub-batch
            let mut sub_pick = perm[..nb / 2].to_vec();
            sub_pick.sort_unstable();
            let rho = |t: &[f64]| loss.objective.kernel_flows_loss(t, &batch, &sub_pick).unwrap_or(f64::NAN);
            if loss.objective.kernel_flows_loss(&theta, &batch, &sub_pick).is_some() {
                fd_gradient(rho, &theta, cfg.fd_step)
            } else {
                fd_gradient(|t| loss.eval(t), &theta, cfg.fd_step)
            }
        } else {
            fd_gradient(|t| loss.eval(t), &theta, cfg.fd_step)
        };
        if grad.iter().any(|v| !v.is_finite()) {
            break;
        }
        let norm = dot(&grad, &grad).sqrt();
        let scale = if norm > 10.0 { 10.0 / norm } else { 1.0 };
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= cfg.kf_step * scale * g;
        }
        let f = loss.eval(&theta);
        let improvement = best_f - f;
        if f < best_f {
            best_f = f;
            best_x = theta.clone();
        }
        trace.push(best_f);
        stall = if improvement > cfg.tol { 0 } else { stall + 1 };
        if stall >= cfg.patience {
            converged = true;
            break;
        }
    }
    finish(best_x, best_f, trace, converged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    struct Quadratic {
        center: Vec<f64>,
    }

    impl LogLikelihood for Quadratic {
        fn dim(&self) -> usize {
            self.center.len()
        }
        fn log_likelihood(&self, theta: &[f64]) -> f64 {
            -theta.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        }
    }

    fn dense_inverse_oracle(spec: &KernelSpec, params: &KernelParams, x: &DMatrix<f64>, y: &[f64]) -> f64 {
        let k = spec.build(params).unwrap();
        let r = rows(x);
        let n = r.len();
        let c = DMatrix::from_fn(n, n, |i, j| k.eval(&r[i], &r[j]) + if i == j { params.noise_var() } else { 0.0 });
        let inv = c.clone().try_inverse().unwrap();
        let yv = DVector::from_column_slice(y);
        -0.5 * (yv.transpose() * inv * &yv)[(0, 0)] - 0.5 * c.determinant().ln() - 0.5 * n as f64 * (2.0 * PI).ln()
    }

    #[test]
    fn single_point_marginal() {
        let spec = KernelSpec::se(2);
        let params = KernelParams::from_natural(&[1.3], 0.7, 0.2);
        let x = DMatrix::from_row_slice(1, 2, &[0.4, 0.1]);
        let v = gp_log_marginal(&spec, &params, &x, &[0.0]).unwrap();
        let expect = -0.5 * (2.0 * PI * (0.49 + 0.04)).ln();
        assert_relative_eq!(v, expect, max_relative = 1e-13);
    }

    #[test]
    fn two_point_marginal_matches_dense_inverse() {
        let spec = KernelSpec::se(1);
        let params = KernelParams::from_natural(&[0.8], 1.2, 0.3);
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 0.5]);
        let y = [1.0, 0.0];
        let v = gp_log_marginal(&spec, &params, &x, &y).unwrap();
        // closed-form 2×2: C = [[a, b], [b, a]]
        let a = 1.44 + 0.09;
        let b = 1.44 * (-0.5 * (0.5f64 / 0.8).powi(2)).exp();
        let det = a * a - b * b;
        let quad = a / det; // yᵀC⁻¹y with y = (1, 0)
        let expect = -0.5 * quad - 0.5 * det.ln() - (2.0 * PI).ln();
        assert_relative_eq!(v, expect, max_relative = 1e-12);
        assert_relative_eq!(v, dense_inverse_oracle(&spec, &params, &x, &y), max_relative = 1e-12);
    }

    #[test]
    fn marginal_decreases_with_noise_on_zero_labels() {
        let spec = KernelSpec::se(1);
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let y = [0.0; 4];
        let mut prev = f64::INFINITY;
        for k in 0..10 {
            let params = KernelParams::new(vec![0.0], 0.0, k as f64);
            let v = gp_log_marginal(&spec, &params, &x, &y).unwrap();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < -30.0);
    }

    #[test]
    fn jitter_rescues_singular_gram() {
        let c = DMatrix::from_element(3, 3, 1.0);
        assert!(spd_factor(&c).is_ok());
        let bad = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        match spd_factor(&bad) {
            Err(Error::Factorization { jitters }) => assert_eq!(jitters.len(), 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn kpcr_zero_residual_and_orthogonal_labels() {
        let spec = KernelSpec::se(2);
        let params = KernelParams::from_natural(&[1.0], 1.0, 0.1);
        let x = DMatrix::from_row_slice(5, 2, &[0.0, 0.0, 1.0, 0.3, -0.5, 1.0, 2.0, -1.0, 0.4, 0.4]);
        let model = fit_kpca_rows(rows(&x), spec.build(&params).unwrap(), RetainPolicy::Fixed(2)).unwrap();
        let t = model.training_scores();

        let y_in: Vec<f64> = (0..5).map(|i| 0.7 * t[(i, 0)] - 0.2 * t[(i, 1)]).collect();
        let fit = kpcr_log_likelihood(&spec, &params, &x, &y_in, RetainPolicy::Fixed(2), Some(0.5)).unwrap();
        assert!(fit.residual_ss < 1e-20);
        assert_relative_eq!(fit.log_likelihood, -2.5 * (2.0 * PI * 0.25).ln(), max_relative = 1e-12);

        // constant labels are orthogonal to the zero-mean score columns
        let y_perp = vec![1.0; 5];
        let fit = kpcr_log_likelihood(&spec, &params, &x, &y_perp, RetainPolicy::Fixed(2), Some(0.5)).unwrap();
        assert_relative_eq!(fit.residual_ss, 5.0, max_relative = 1e-10);
    }

    #[test]
    fn kpcr_matches_normal_equations() {
        let spec = KernelSpec::se(2);
        let params = KernelParams::from_natural(&[0.9], 1.0, 0.1);
        let x = DMatrix::from_fn(8, 2, |i, j| ((i * 5 + j * 3) % 7) as f64 * 0.4 - 1.0);
        let y = [0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        let fit = kpcr_log_likelihood(&spec, &params, &x, &y, RetainPolicy::Fixed(3), None).unwrap();
        let model = fit_kpca_rows(rows(&x), spec.build(&params).unwrap(), RetainPolicy::Fixed(3)).unwrap();
        let t = model.training_scores();
        let yv = DVector::from_column_slice(&y);
        let beta = (t.transpose() * &t).try_inverse().unwrap() * t.transpose() * &yv;
        let rss = (&yv - &t * &beta).norm_squared();
        assert_relative_eq!(fit.residual_ss, rss, max_relative = 1e-10);
        assert_relative_eq!(fit.sigma, (rss / 5.0).sqrt(), max_relative = 1e-10);
        assert!(!fit.used_pseudo_inverse);
    }

    #[test]
    fn quadratic_harness_all_methods() {
        let obj = Quadratic {
            center: vec![0.5, -1.0, 2.0],
        };
        let init = [1.5, -2.0, 2.5];
        for method in [
            OptimizerMethod::Lbfgs,
            OptimizerMethod::NelderMead,
            OptimizerMethod::GeneticAlgorithm,
            OptimizerMethod::KernelFlows,
        ] {
            let cfg = OptimizerConfig::new(method).with_seed(7);
            let res = calibrate(&obj, &cfg, &init).unwrap();
            let tol = match method {
                OptimizerMethod::Lbfgs | OptimizerMethod::NelderMead => 1e-3,
                _ => 1e-1,
            };
            for (a, b) in res.theta_hat.iter().zip(&obj.center) {
                assert!((a - b).abs() < tol, "{method:?}: {:?}", res.theta_hat);
            }
            assert!(res.log_likelihood >= obj.log_likelihood(&init));
            assert!(res.loss_trace.windows(2).all(|w| w[1] <= w[0]), "{method:?} trace not monotone");
        }
    }

    #[test]
    fn calibration_is_deterministic() {
        let obj = Quadratic { center: vec![0.1, 0.2] };
        for method in [OptimizerMethod::GeneticAlgorithm, OptimizerMethod::KernelFlows, OptimizerMethod::Lbfgs] {
            let cfg = OptimizerConfig::new(method).with_seed(3);
            let a = calibrate(&obj, &cfg, &[1.0, 1.0]).unwrap();
            let b = calibrate(&obj, &cfg, &[1.0, 1.0]).unwrap();
            assert_eq!(a.loss_trace, b.loss_trace);
            assert_eq!(a.theta_hat, b.theta_hat);
        }
    }

    #[test]
    fn non_finite_init_is_rejected() {
        struct Nowhere;
        impl LogLikelihood for Nowhere {
            fn dim(&self) -> usize {
                1
            }
            fn log_likelihood(&self, _: &[f64]) -> f64 {
                f64::NEG_INFINITY
            }
        }
        let cfg = OptimizerConfig::new(OptimizerMethod::Lbfgs);
        assert_eq!(calibrate(&Nowhere, &cfg, &[0.0]), Err(Error::NonFiniteInit));
    }

    #[test]
    fn budget_exhaustion_reports_not_converged() {
        let obj = Quadratic { center: vec![3.0, -3.0] };
        let mut cfg = OptimizerConfig::new(OptimizerMethod::NelderMead);
        cfg.max_iters = 2;
        let res = calibrate(&obj, &cfg, &[0.0, 0.0]).unwrap();
        assert!(!res.converged);
    }

    #[test]
    fn full_batch_subset_equals_full_objective() {
        let spec = KernelSpec::se(2);
        let x = DMatrix::from_fn(10, 2, |i, j| ((i * 3 + j * 7) % 11) as f64 * 0.3);
        let y: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        let theta = [0.1, -0.2, -1.5];
        let all: Vec<usize> = (0..10).collect();
        let gp = CalibrationObjective::gp_marginal(spec, &x, &y).unwrap();
        assert_eq!(gp.log_likelihood_subset(&theta, &all), gp.log_likelihood(&theta));
        let kp = CalibrationObjective::kpcr(spec, &x, &y, RetainPolicy::Fixed(3), None).unwrap();
        assert_eq!(kp.log_likelihood_subset(&theta, &all), kp.log_likelihood(&theta));
        assert_eq!(gp.kernel_flows_loss(&theta, &all, &all), Some(0.0));
    }

    #[test]
    fn labels_must_be_binary() {
        let x = DMatrix::from_element(3, 1, 0.0);
        assert!(CalibrationObjective::gp_marginal(KernelSpec::se(1), &x, &[0.0, 0.5, 1.0]).is_err());
    }

    #[test]
    fn fd_gradient_matches_analytic_quadratic() {
        let f = |t: &[f64]| t[0] * t[0] + 3.0 * t[0] * t[1] + t[1].powi(3);
        let g = fd_gradient(f, &[0.5, -1.2], 1e-5);
        assert_relative_eq!(g[0], 2.0 * 0.5 + 3.0 * -1.2, max_relative = 1e-8);
        assert_relative_eq!(g[1], 3.0 * 0.5 + 3.0 * 1.44, max_relative = 1e-8);
    }
}

//! Lengthscale selection from healthy data alone, and chart-induced labels.
//!
//! `M1` and `M2` are closed-form distance statistics, `M3` solves for a target
//! mean similarity by bisection, and `M4`–`M10` scan a log-spaced grid anchored
//! at the `M1` value. Resampling criteria draw their splits once from the
//! configured seed and reuse them for every candidate.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{center_train_gram, gram_from_rows, rows, Kernel, KernelParams, KernelSpec, SeKernel};
use crate::kpca::{control_limits, fit_kpca_rows, ControlLimits, KpcaModel, RetainPolicy};
use crate::stats;

/// Signal sd used for every unsupervised candidate kernel.
pub const UNSUPERVISED_SIGNAL_SD: f64 = 1.0;
/// Noise sd assigned alongside an unsupervised lengthscale.
pub const UNSUPERVISED_NOISE_SD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnsupervisedMethod {
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
    M7,
    M8,
    M9,
    M10,
}

impl UnsupervisedMethod {
    pub const ALL: [Self; 10] = [
        Self::M1,
        Self::M2,
        Self::M3,
        Self::M4,
        Self::M5,
        Self::M6,
        Self::M7,
        Self::M8,
        Self::M9,
        Self::M10,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::M1 => "M1",
            Self::M2 => "M2",
            Self::M3 => "M3",
            Self::M4 => "M4",
            Self::M5 => "M5",
            Self::M6 => "M6",
            Self::M7 => "M7",
            Self::M8 => "M8",
            Self::M9 => "M9",
            Self::M10 => "M10",
        }
    }

    pub fn description(&self) -> &'static str {
        match self {
            Self::M1 => "median pairwise distance",
            Self::M2 => "median k-nearest-neighbour distance",
            Self::M3 => "target mean off-diagonal similarity",
            Self::M4 => "target effective rank",
            Self::M5 => "K-PCA subspace stability",
            Self::M6 => "stability of healthy control limits",
            Self::M7 => "support fraction and rejection stability",
            Self::M8 => "MMD between temporal halves",
            Self::M9 => "cross-validated kernel ridge error",
            Self::M10 => "kNN graph alignment",
        }
    }

    fn uses_grid(&self) -> bool {
        !matches!(self, Self::M1 | Self::M2 | Self::M3)
    }
}

impl std::fmt::Display for UnsupervisedMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for UnsupervisedMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_uppercase();
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == t)
            .ok_or_else(|| Error::Input(format!("unknown unsupervised method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningConfig {
    pub seed: u64,
    pub grid_size: usize,
    /// Grid spans `[lo·ℓ_M1, hi·ℓ_M1]`.
    pub grid_span: (f64, f64),
    /// Neighbour count for M2 and M10; `None` uses `max(5, ⌈0.05 n⌉)`.
    pub knn: Option<usize>,
    pub target_similarity: f64,
    /// Target effective rank for M4; `None` uses `min(p, 10)`.
    pub target_rank: Option<usize>,
    pub subspace_splits: usize,
    pub bootstrap_resamples: usize,
    pub limit_confidence: f64,
    pub support_nu: f64,
    pub support_resamples: usize,
    pub cv_folds: usize,
    pub ridge: f64,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid_size: 40,
            grid_span: (0.1, 10.0),
            knn: None,
            target_similarity: 0.5,
            target_rank: None,
            subspace_splits: 20,
            bootstrap_resamples: 20,
            limit_confidence: 0.99,
            support_nu: 0.05,
            support_resamples: 10,
            cv_folds: 5,
            ridge: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningResult {
    pub method: UnsupervisedMethod,
    pub lengthscale: f64,
    /// Candidate grid (empty for the closed-form rules).
    pub grid: Vec<f64>,
    /// Criterion per grid candidate; NaN marks a degenerate candidate.
    pub criterion: Vec<f64>,
}

impl TuningResult {
    /// Kernel parameters with the tuned lengthscale and the fixed signal and noise sd.
    pub fn params(&self) -> KernelParams {
        KernelParams::from_natural(&[self.lengthscale], UNSUPERVISED_SIGNAL_SD, UNSUPERVISED_NOISE_SD)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median of the `n(n-1)/2` pairwise Euclidean distances.
pub fn median_pairwise_distance(x: &[Vec<f64>]) -> f64 {
    let mut d: Vec<f64> = (0..x.len())
        .flat_map(|i| (i + 1..x.len()).map(move |j| (i, j)))
        .map(|(i, j)| sq_dist(&x[i], &x[j]).sqrt())
        .collect();
    if d.is_empty() {
        return f64::NAN;
    }
    median(&mut d)
}

/// Default neighbour count `max(5, ⌈0.05 n⌉)`, capped at `n - 1`.
pub fn default_knn(n: usize) -> usize {
    5usize.max((0.05 * n as f64).ceil() as usize).min(n.saturating_sub(1))
}

fn neighbour_order(x: &[Vec<f64>]) -> Vec<Vec<(f64, usize)>> {
    (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..x.len())
                .filter(|&j| j != i)
                .map(|j| (sq_dist(&x[i], &x[j]).sqrt(), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d
        })
        .collect()
}

/// Median over samples of the distance to the `k`-th nearest neighbour.
pub fn median_knn_distance(x: &[Vec<f64>], k: usize) -> f64 {
    let k = k.clamp(1, x.len().saturating_sub(1).max(1));
    let mut d: Vec<f64> = neighbour_order(x).into_iter().map(|nb| nb[k - 1].0).collect();
    median(&mut d)
}

/// `size` log-spaced lengthscales from `span.0·anchor` to `span.1·anchor`.
pub fn lengthscale_grid(anchor: f64, span: (f64, f64), size: usize) -> Vec<f64> {
    let (lo, hi) = ((span.0 * anchor).ln(), (span.1 * anchor).ln());
    if size == 1 {
        return vec![(0.5 * (lo + hi)).exp()];
    }
    (0..size)
        .map(|i| (lo + (hi - lo) * i as f64 / (size - 1) as f64).exp())
        .collect()
}

/// `exp(-Σ q log q)` with `q = λ / Σλ` over the positive eigenvalues.
pub fn effective_rank(eigenvalues: &[f64]) -> f64 {
    let total: f64 = eigenvalues.iter().filter(|v| **v > 0.0).sum();
    if total <= 0.0 {
        return f64::NAN;
    }
    let h: f64 = eigenvalues
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| {
            let q = v / total;
            -q * q.ln()
        })
        .sum();
    h.exp()
}

/// Unbiased estimate of the squared maximum mean discrepancy.
pub fn mmd2_unbiased<K: Kernel + ?Sized>(kernel: &K, a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let within = |s: &[Vec<f64>]| -> f64 {
        let m = s.len() as f64;
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    acc += kernel.eval(&s[i], &s[j]);
                }
            }
        }
        acc / (m * (m - 1.0))
    };
    let cross: f64 = a.iter().flat_map(|x| b.iter().map(move |y| kernel.eval(x, y))).sum::<f64>();
    within(a) + within(b) - 2.0 * cross / (a.len() * b.len()) as f64
}

fn candidate_kernel(p: usize, ell: f64) -> Result<SeKernel> {
    KernelSpec::se(p).build(&KernelParams::from_natural(&[ell], UNSUPERVISED_SIGNAL_SD, UNSUPERVISED_NOISE_SD))
}

fn mean_offdiag_similarity(x: &[Vec<f64>], ell: f64) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            acc += (-0.5 * sq_dist(&x[i], &x[j]) / (ell * ell)).exp();
        }
    }
    acc / (n * (n - 1) / 2) as f64
}

fn tuning_error(method: UnsupervisedMethod, reason: impl Into<String>) -> Error {
    Error::Tuning {
        method: method.as_str().to_string(),
        reason: reason.into(),
    }
}

/// Selects a global SE lengthscale from autoscaled healthy data.
pub fn tune_unsupervised(method: UnsupervisedMethod, x: &DMatrix<f64>, cfg: &TuningConfig) -> Result<TuningResult> {
    let n = x.nrows();
    if n < 10 {
        return Err(Error::Input(format!("unsupervised tuning needs at least 10 samples, got {n}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("healthy data"));
    }
    if cfg.grid_size == 0 || !(cfg.grid_span.0 > 0.0 && cfg.grid_span.1 >= cfg.grid_span.0) {
        return Err(Error::Input("invalid lengthscale grid".into()));
    }
    let data = rows(x);
    let m1 = median_pairwise_distance(&data);
    if !(m1 > 0.0) {
        return Err(tuning_error(method, "median pairwise distance is zero"));
    }
    let k = cfg.knn.unwrap_or_else(|| default_knn(n)).clamp(1, n - 1);
    let closed = |ell: f64| -> Result<TuningResult> {
        if !(ell > 0.0 && ell.is_finite()) {
            return Err(tuning_error(method, format!("non-positive lengthscale {ell}")));
        }
        Ok(TuningResult {
            method,
            lengthscale: ell,
            grid: Vec::new(),
            criterion: Vec::new(),
        })
    };
    match method {
        UnsupervisedMethod::M1 => return closed(m1),
        UnsupervisedMethod::M2 => return closed(median_knn_distance(&data, k)),
        UnsupervisedMethod::M3 => {
            return closed(bisect_similarity(&data, m1, cfg));
        }
        _ => {}
    }
    debug_assert!(method.uses_grid());

    let grid = lengthscale_grid(m1, cfg.grid_span, cfg.grid_size);
    let ctx = Context::new(method, &data, k, cfg);
    let criterion: Vec<f64> = grid
        .par_iter()
        .map(|&ell| ctx.criterion(ell).filter(|v| v.is_finite()).unwrap_or(f64::NAN))
        .collect();
    let maximize = matches!(method, UnsupervisedMethod::M5 | UnsupervisedMethod::M10);
    let best = (0..grid.len())
        .filter(|&i| criterion[i].is_finite())
        .reduce(|a, b| {
            let better = if maximize {
                criterion[b] > criterion[a]
            } else {
                criterion[b] < criterion[a]
            };
            if better {
                b
            } else {
                a
            }
        })
        .ok_or_else(|| tuning_error(method, "every grid candidate gave a degenerate criterion"))?;
    Ok(TuningResult {
        method,
        lengthscale: grid[best],
        grid,
        criterion,
    })
}

fn bisect_similarity(x: &[Vec<f64>], m1: f64, cfg: &TuningConfig) -> f64 {
    let target = cfg.target_similarity;
    let (mut lo, mut hi) = ((cfg.grid_span.0 * m1).ln(), (cfg.grid_span.1 * m1).ln());
    let f = |log_ell: f64| mean_offdiag_similarity(x, log_ell.exp()) - target;
    if f(lo) >= 0.0 {
        return lo.exp();
    }
    if f(hi) <= 0.0 {
        return hi.exp();
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// Shared inputs for the grid criteria; resamples are drawn once.
struct Context<'a> {
    method: UnsupervisedMethod,
    x: &'a [Vec<f64>],
    cfg: &'a TuningConfig,
    resamples: Vec<(Vec<usize>, Vec<usize>)>,
    adjacency: Option<DMatrix<f64>>,
}

impl<'a> Context<'a> {
    fn new(method: UnsupervisedMethod, x: &'a [Vec<f64>], k: usize, cfg: &'a TuningConfig) -> Self {
        let n = x.len();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let halves = |count: usize, rng: &mut ChaCha8Rng| -> Vec<(Vec<usize>, Vec<usize>)> {
            (0..count)
                .map(|_| {
                    let mut perm: Vec<usize> = (0..n).collect();
                    perm.shuffle(rng);
                    let (a, b) = perm.split_at(n / 2);
                    let (mut a, mut b) = (a.to_vec(), b.to_vec());
                    a.sort_unstable();
                    b.sort_unstable();
                    (a, b)
                })
                .collect()
        };
        let resamples = match method {
            UnsupervisedMethod::M5 => halves(cfg.subspace_splits, &mut rng),
            UnsupervisedMethod::M7 => halves(cfg.support_resamples, &mut rng),
            UnsupervisedMethod::M6 => (0..cfg.bootstrap_resamples)
                .map(|_| ((0..n).map(|_| rng.random_range(0..n)).collect(), Vec::new()))
                .collect(),
            _ => Vec::new(),
        };
        let adjacency = (method == UnsupervisedMethod::M10).then(|| {
            let order = neighbour_order(x);
            let mut a = DMatrix::zeros(n, n);
            for (i, nb) in order.iter().enumerate() {
                for &(_, j) in nb.iter().take(k) {
                    a[(i, j)] = 1.0;
                    a[(j, i)] = 1.0;
                }
            }
            a
        });
        Self {
            method,
            x,
            cfg,
            resamples,
            adjacency,
        }
    }

    fn pick(&self, idx: &[usize]) -> Vec<Vec<f64>> {
        idx.iter().map(|&i| self.x[i].clone()).collect()
    }

    fn criterion(&self, ell: f64) -> Option<f64> {
        let p = self.x[0].len();
        let kernel = candidate_kernel(p, ell).ok()?;
        match self.method {
            UnsupervisedMethod::M4 => {
                let model = fit_kpca_rows(self.x.to_vec(), kernel, RetainPolicy::Fixed(usize::MAX)).ok()?;
                let target = self.cfg.target_rank.unwrap_or(p.min(10)) as f64;
                Some((effective_rank(model.spectrum()) - target).abs())
            }
            UnsupervisedMethod::M5 => self.subspace_stability(&kernel),
            UnsupervisedMethod::M6 => self.limit_variability(&kernel),
            UnsupervisedMethod::M7 => self.support_fraction(&kernel),
            UnsupervisedMethod::M8 => {
                let half = self.x.len() / 2;
                Some(mmd2_unbiased(&kernel, &self.x[..half], &self.x[half..]))
            }
            UnsupervisedMethod::M9 => self.ridge_cv(&kernel),
            UnsupervisedMethod::M10 => self.graph_alignment(&kernel),
            UnsupervisedMethod::M1 | UnsupervisedMethod::M2 | UnsupervisedMethod::M3 => None,
        }
    }

    fn subspace_stability(&self, kernel: &SeKernel) -> Option<f64> {
        let r = self.x[0].len().min(10);
        let embed = |idx: &[usize]| -> Option<DMatrix<f64>> {
            let model = fit_kpca_rows(self.pick(idx), kernel.clone(), RetainPolicy::Fixed(r)).ok()?;
            if model.n_components() < r {
                return None;
            }
            let scores: Vec<Vec<f64>> = self.x.iter().map(|x| model.score(x)).collect::<Result<_>>().ok()?;
            let s = DMatrix::from_fn(self.x.len(), r, |i, h| scores[i][h]);
            Some(s.qr().q())
        };
        let mut total = 0.0;
        for (a, b) in &self.resamples {
            let qa = embed(a)?;
            let qb = embed(b)?;
            total += (qa.transpose() * qb).norm_squared() / r as f64;
        }
        Some(total / self.resamples.len() as f64)
    }

    fn limit_variability(&self, kernel: &SeKernel) -> Option<f64> {
        let mut t2 = Vec::new();
        let mut spe = Vec::new();
        for (idx, _) in &self.resamples {
            let sample = self.pick(idx);
            let model = fit_kpca_rows(sample.clone(), kernel.clone(), RetainPolicy::default()).ok()?;
            let stats = model.monitor_rows(&sample).ok()?;
            let limits = control_limits(&stats, self.cfg.limit_confidence).ok()?;
            t2.push(limits.t2_limit);
            spe.push(limits.spe_limit);
        }
        let cv = |v: &[f64]| stats::std_dev(v) / stats::mean(v);
        Some(cv(&t2) + cv(&spe))
    }

    fn support_fraction(&self, kernel: &SeKernel) -> Option<f64> {
        let nu = self.cfg.support_nu;
        let density = |x: &[f64], fit: &[Vec<f64>]| fit.iter().map(|f| kernel.eval(x, f)).sum::<f64>() / fit.len() as f64;
        let fractions: Vec<f64> = self
            .resamples
            .iter()
            .map(|(a, b)| {
                let fit = self.pick(a);
                let scores: Vec<f64> = fit.iter().map(|x| density(x, &fit)).collect();
                let threshold = stats::quantile(&scores, nu);
                let rejected = b.iter().filter(|&&i| density(&self.x[i], &fit) < threshold).count();
                rejected as f64 / b.len() as f64
            })
            .collect();
        Some((stats::mean(&fractions) - nu).abs() + stats::variance(&fractions))
    }

    fn ridge_cv(&self, kernel: &SeKernel) -> Option<f64> {
        let n = self.x.len();
        let p = self.x[0].len();
        let folds = self.cfg.cv_folds.clamp(2, n);
        let mut sse = 0.0;
        for fold in 0..folds {
            let test: Vec<usize> = (0..n).filter(|i| i % folds == fold).collect();
            let train: Vec<usize> = (0..n).filter(|i| i % folds != fold).collect();
            let xt = self.pick(&train);
            let mut k = gram_from_rows(kernel, &xt).ok()?;
            for i in 0..train.len() {
                k[(i, i)] += self.cfg.ridge;
            }
            let ch = crate::calibration::spd_factor(&k).ok()?;
            let y = DMatrix::from_fn(train.len(), p, |i, d| xt[i][d]);
            let alpha = ch.solve(&y);
            for &i in &test {
                let kv = DMatrix::from_fn(1, train.len(), |_, j| kernel.eval(&self.x[i], &xt[j]));
                let pred = kv * &alpha;
                sse += (0..p).map(|d| (pred[(0, d)] - self.x[i][d]).powi(2)).sum::<f64>();
            }
        }
        Some(sse / (n * p) as f64)
    }

    fn graph_alignment(&self, kernel: &SeKernel) -> Option<f64> {
        let (kc, _) = center_train_gram(&gram_from_rows(kernel, self.x).ok()?).ok()?;
        let (ac, _) = center_train_gram(self.adjacency.as_ref()?).ok()?;
        let denom = kc.norm() * ac.norm();
        if !(denom > 0.0) {
            return None;
        }
        Some(kc.dot(&ac) / denom)
    }
}

/// Chart-induced binary labels for monitored samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<bool>,
    pub limits: ControlLimits,
}

impl PseudoLabels {
    pub fn as_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn fraction_positive(&self) -> f64 {
        self.labels.iter().filter(|b| **b).count() as f64 / self.labels.len().max(1) as f64
    }
}

/// `ỹ_i = 1` when either statistic exceeds its limit.
pub fn assign_pseudo_labels<K: Kernel>(model: &KpcaModel<K>, limits: &ControlLimits, x: &DMatrix<f64>) -> Result<PseudoLabels> {
    let stats = model.monitor(x)?;
    let labels = stats
        .t2
        .iter()
        .zip(&stats.spe)
        .map(|(t2, spe)| *t2 > limits.t2_limit || *spe > limits.spe_limit)
        .collect();
    Ok(PseudoLabels {
        labels,
        limits: *limits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn m1_closed_forms() {
        let two = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        assert_eq!(median_pairwise_distance(&two), 5.0);
        let line = vec![vec![0.0], vec![1.0], vec![3.0]];
        // brute force: distances 1, 3, 2 → sorted 1, 2, 3
        let mut d = vec![1.0, 3.0, 2.0];
        d.sort_by(f64::total_cmp);
        assert_eq!(median_pairwise_distance(&line), d[1]);
    }

    #[test]
    fn m1_scales_exactly_and_ignores_order() {
        let x = gaussian(30, 3, 1);
        let base = tune_unsupervised(UnsupervisedMethod::M1, &x, &TuningConfig::default()).unwrap();
        let scaled = tune_unsupervised(UnsupervisedMethod::M1, &(&x * 4.0), &TuningConfig::default()).unwrap();
        assert_eq!(scaled.lengthscale, 4.0 * base.lengthscale);

        let mut rev = x.clone();
        for i in 0..30 {
            rev.set_row(i, &x.row(29 - i));
        }
        for m in [UnsupervisedMethod::M1, UnsupervisedMethod::M2] {
            let a = tune_unsupervised(m, &x, &TuningConfig::default()).unwrap();
            let b = tune_unsupervised(m, &rev, &TuningConfig::default()).unwrap();
            assert_eq!(a.lengthscale, b.lengthscale);
        }
    }

    #[test]
    fn m2_brute_force() {
        let x = gaussian(12, 2, 4);
        let r = rows(&x);
        let k = default_knn(12);
        assert_eq!(k, 5);
        let mut kth: Vec<f64> = (0..12)
            .map(|i| {
                let mut d: Vec<f64> = (0..12).filter(|&j| j != i).map(|j| sq_dist(&r[i], &r[j]).sqrt()).collect();
                d.sort_by(f64::total_cmp);
                d[k - 1]
            })
            .collect();
        kth.sort_by(f64::total_cmp);
        assert_relative_eq!(median_knn_distance(&r, k), 0.5 * (kth[5] + kth[6]));
    }

    #[test]
    fn m3_hits_target_similarity() {
        let x = gaussian(25, 3, 2);
        let res = tune_unsupervised(UnsupervisedMethod::M3, &x, &TuningConfig::default()).unwrap();
        assert_relative_eq!(mean_offdiag_similarity(&rows(&x), res.lengthscale), 0.5, epsilon = 1e-9);
    }

    #[test]
    fn grid_is_log_spaced() {
        let g = lengthscale_grid(2.0, (0.1, 10.0), 40);
        assert_eq!(g.len(), 40);
        assert_relative_eq!(g[0], 0.2, max_relative = 1e-12);
        assert_relative_eq!(g[39], 20.0, max_relative = 1e-12);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn effective_rank_examples() {
        assert_relative_eq!(effective_rank(&[1.0, 1.0, 1.0, 1.0]), 4.0, max_relative = 1e-12);
        assert_relative_eq!(effective_rank(&[2.0, 0.0]), 1.0);
    }

    #[test]
    fn mmd_of_identical_halves_is_small() {
        let a = rows(&gaussian(40, 2, 5));
        let k = candidate_kernel(2, 1.0).unwrap();
        let same = mmd2_unbiased(&k, &a, &a);
        assert!(same < 0.0, "identical sets remove the diagonal, so the estimate is negative: {same}");
        let shifted: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v + 3.0).collect()).collect();
        assert!(mmd2_unbiased(&k, &a, &shifted) > 0.5);
    }

    #[test]
    fn grid_methods_return_grid_members() {
        let x = gaussian(40, 3, 9);
        let cfg = TuningConfig {
            grid_size: 8,
            subspace_splits: 3,
            bootstrap_resamples: 3,
            support_resamples: 3,
            ..Default::default()
        };
        for m in UnsupervisedMethod::ALL.into_iter().filter(|m| m.uses_grid()) {
            let res = tune_unsupervised(m, &x, &cfg).unwrap();
            assert!(res.grid.contains(&res.lengthscale), "{m}");
            assert!(res.lengthscale > 0.0);
        }
    }

    #[test]
    fn too_few_samples_and_constant_data() {
        assert!(tune_unsupervised(UnsupervisedMethod::M1, &gaussian(9, 2, 1), &TuningConfig::default()).is_err());
        let flat = DMatrix::from_element(12, 2, 1.0);
        assert!(matches!(
            tune_unsupervised(UnsupervisedMethod::M4, &flat, &TuningConfig::default()),
            Err(Error::Tuning { .. })
        ));
    }

    #[test]
    fn pseudo_labels_follow_limits() {
        let x = gaussian(50, 3, 3);
        let model = fit_kpca_rows(rows(&x), candidate_kernel(3, 2.0).unwrap(), RetainPolicy::default()).unwrap();
        let stats = model.monitor(&x).unwrap();
        let limits = control_limits(&stats, 0.99).unwrap();
        let labels = assign_pseudo_labels(&model, &limits, &x).unwrap();
        let brute = stats
            .t2
            .iter()
            .zip(&stats.spe)
            .filter(|(t, s)| **t > limits.t2_limit || **s > limits.spe_limit)
            .count();
        assert_eq!(labels.labels.iter().filter(|b| **b).count(), brute);
        assert!(brute >= 1 && brute <= 2);

        let high = ControlLimits {
            t2_limit: f64::MAX,
            spe_limit: f64::MAX,
            confidence: 0.99,
        };
        assert!(assign_pseudo_labels(&model, &high, &x).unwrap().labels.iter().all(|b| !b));
        let zero = ControlLimits {
            t2_limit: 0.0,
            spe_limit: 0.0,
            confidence: 0.99,
        };
        assert!(assign_pseudo_labels(&model, &zero, &x).unwrap().labels.iter().all(|b| *b));
    }
}

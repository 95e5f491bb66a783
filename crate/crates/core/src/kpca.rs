//! Kernel PCA monitoring model: T², SPE, empirical control limits and
//! gradient-based variable contributions.
//!
//! Scores follow `t = k_c(x)ᵀ U Λ^{-1/2}` and `T² = Σ t_h²/λ_h` where `λ_h` are
//! eigenvalues of the centered training Gram. Under this normalization the
//! training scores satisfy `Σ_i t_ih² = λ_h`, so the mean training T² is `r/n`.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{center_test_vector, center_train_gram, gram_from_rows, rows, CenteringStats, Kernel, SeKernel};
use crate::stats;

/// Eigenvalues at or below `EIGEN_FLOOR_REL * λ_1` are discarded.
pub const EIGEN_FLOOR_REL: f64 = 1e-10;

/// How many leading components to retain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RetainPolicy {
    /// Fixed count, clamped to the numerical rank.
    Fixed(usize),
    /// Smallest count whose eigenvalues reach this fraction of the retained spectrum.
    Fraction(f64),
}

impl Default for RetainPolicy {
    fn default() -> Self {
        RetainPolicy::Fraction(0.95)
    }
}

impl RetainPolicy {
    fn select(&self, spectrum: &[f64]) -> usize {
        match *self {
            RetainPolicy::Fixed(r) => r.min(spectrum.len()),
            RetainPolicy::Fraction(f) => {
                let total: f64 = spectrum.iter().sum();
                let mut acc = 0.0;
                for (h, l) in spectrum.iter().enumerate() {
                    acc += l;
                    if acc >= f * total {
                        return h + 1;
                    }
                }
                spectrum.len()
            }
        }
    }
}

impl std::fmt::Display for RetainPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RetainPolicy::Fixed(r) => write!(f, "fixed:{r}"),
            RetainPolicy::Fraction(q) => write!(f, "frac:{q}"),
        }
    }
}

impl std::str::FromStr for RetainPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("invalid retain policy '{s}' (expected fixed:<r> or frac:<q>)"));
        let (kind, value) = s.trim().split_once(':').ok_or_else(bad)?;
        match kind {
            "fixed" => value.parse().map(RetainPolicy::Fixed).map_err(|_| bad()),
            "frac" => {
                let q: f64 = value.parse().map_err(|_| bad())?;
                if q > 0.0 && q <= 1.0 {
                    Ok(RetainPolicy::Fraction(q))
                } else {
                    Err(bad())
                }
            }
            _ => Err(bad()),
        }
    }
}

/// Per-sample monitoring statistics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MonitoringStatistics {
    pub t2: Vec<f64>,
    pub spe: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlLimits {
    pub t2_limit: f64,
    pub spe_limit: f64,
    pub confidence: f64,
}

/// Signed per-variable contributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionVector(pub Vec<f64>);

/// Statistics of a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub scores: Vec<f64>,
    pub t2: f64,
    pub spe: f64,
}

/// A fitted K-PCA monitoring model. Immutable after [`fit_kpca`].
#[derive(Debug, Clone)]
pub struct KpcaModel<K = SeKernel> {
    kernel: K,
    train: Vec<Vec<f64>>,
    centering: CenteringStats,
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
    projection: DMatrix<f64>,
    // every eigenpair above the floor, for truncation
    spectrum: Vec<f64>,
    basis: DMatrix<f64>,
}

pub fn fit_kpca<K: Kernel>(x: &DMatrix<f64>, kernel: K, policy: RetainPolicy) -> Result<KpcaModel<K>> {
    fit_kpca_rows(rows(x), kernel, policy)
}

pub fn fit_kpca_rows<K: Kernel>(train: Vec<Vec<f64>>, kernel: K, policy: RetainPolicy) -> Result<KpcaModel<K>> {
    let n = train.len();
    if n < 3 {
        return Err(Error::Input(format!("K-PCA needs at least 3 samples, got {n}")));
    }
    let gram = gram_from_rows(&kernel, &train)?;
    let (kc, centering) = center_train_gram(&gram)?;
    let eig = SymmetricEigen::new(kc);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]];
    if !(top.is_finite() && top > 0.0) {
        return Err(Error::Degenerate("centered Gram has no positive eigenvalue".into()));
    }
    let floor = EIGEN_FLOOR_REL * top;
    let kept: Vec<usize> = order.into_iter().filter(|&i| eig.eigenvalues[i] > floor).collect();

    let spectrum: Vec<f64> = kept.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut basis = DMatrix::zeros(n, kept.len());
    for (c, &i) in kept.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).clone_owned();
        // sign convention: largest-magnitude entry positive (first one on ties)
        let mut arg = 0;
        for k in 1..n {
            if v[k].abs() > v[arg].abs() {
                arg = k;
            }
        }
        if v[arg] < 0.0 {
            v.neg_mut();
        }
        basis.set_column(c, &v);
    }

    let r = policy.select(&spectrum);
    Ok(KpcaModel::assemble(kernel, train, centering, spectrum, basis, r))
}

impl<K: Kernel> KpcaModel<K> {
    fn assemble(
        kernel: K,
        train: Vec<Vec<f64>>,
        centering: CenteringStats,
        spectrum: Vec<f64>,
        basis: DMatrix<f64>,
        r: usize,
    ) -> Self {
        let eigenvalues = spectrum[..r].to_vec();
        let eigenvectors = basis.columns(0, r).clone_owned();
        let mut projection = eigenvectors.clone();
        for (h, l) in eigenvalues.iter().enumerate() {
            projection.column_mut(h).scale_mut(1.0 / l.sqrt());
        }
        Self {
            kernel,
            train,
            centering,
            eigenvalues,
            eigenvectors,
            projection,
            spectrum,
            basis,
        }
    }

    pub fn kernel(&self) -> &K {
        &self.kernel
    }

    pub fn n_components(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    /// Numerical rank of the centered Gram (eigenvalues above the floor).
    pub fn rank(&self) -> usize {
        self.spectrum.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// All eigenvalues above the floor, descending.
    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn centering(&self) -> &CenteringStats {
        &self.centering
    }

    pub fn train_rows(&self) -> &[Vec<f64>] {
        &self.train
    }

    /// Same model with a different number of retained components.
    pub fn with_components(&self, r: usize) -> Self
    where
        K: Clone,
    {
        Self::assemble(
            self.kernel.clone(),
            self.train.clone(),
            self.centering.clone(),
            self.spectrum.clone(),
            self.basis.clone(),
            r.min(self.spectrum.len()),
        )
    }

    /// Training score matrix `U Λ^{1/2}` (equal to `K_c U Λ^{-1/2}`).
    pub fn training_scores(&self) -> DMatrix<f64> {
        let mut t = self.eigenvectors.clone();
        for (h, l) in self.eigenvalues.iter().enumerate() {
            t.column_mut(h).scale_mut(l.sqrt());
        }
        t
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: x.len(),
                context: "monitored sample",
            });
        }
        Ok(())
    }

    /// Centered kernel vector `k_c(x)` and centered self-similarity `k_c(x, x)`.
    pub fn centered_kernel(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dim(x)?;
        let kv: Vec<f64> = self.train.iter().map(|xi| self.kernel.eval(x, xi)).collect();
        center_test_vector(&kv, self.kernel.eval(x, x), &self.centering)
    }

    fn project(&self, kc: &[f64]) -> Vec<f64> {
        (0..self.n_components())
            .map(|h| {
                self.projection
                    .column(h)
                    .iter()
                    .zip(kc)
                    .map(|(a, k)| a * k)
                    .sum()
            })
            .collect()
    }

    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (kc, _) = self.centered_kernel(x)?;
        Ok(self.project(&kc))
    }

    pub fn t2_statistic(&self, t: &[f64]) -> f64 {
        t.iter().zip(&self.eigenvalues).map(|(t, l)| t * t / l).sum()
    }

    /// `k_c(x, x) - Σ t_h²`, clamped at zero.
    pub fn spe_statistic(&self, x: &[f64], t: &[f64]) -> Result<f64> {
        let (_, kc_self) = self.centered_kernel(x)?;
        Ok(spe_from_parts(kc_self, t))
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<Evaluation> {
        let (kc, kc_self) = self.centered_kernel(x)?;
        let scores = self.project(&kc);
        let t2 = self.t2_statistic(&scores);
        let spe = spe_from_parts(kc_self, &scores);
        Ok(Evaluation { scores, t2, spe })
    }

    /// T² and SPE for every row of `x`, evaluated in parallel.
    pub fn monitor(&self, x: &DMatrix<f64>) -> Result<MonitoringStatistics> {
        self.monitor_rows(&rows(x))
    }

    pub fn monitor_rows(&self, x: &[Vec<f64>]) -> Result<MonitoringStatistics> {
        let evals: Vec<Evaluation> = x.par_iter().map(|r| self.evaluate(r)).collect::<Result<_>>()?;
        Ok(MonitoringStatistics {
            t2: evals.iter().map(|e| e.t2).collect(),
            spe: evals.iter().map(|e| e.spe).collect(),
        })
    }

    /// Score Jacobian `∂t_h/∂x_d` (r × p) and `∂k_c(x,x)/∂x_d` at `x`.
    fn score_jacobian(&self, x: &[f64]) -> (DMatrix<f64>, Vec<f64>) {
        let p = self.dim();
        let n = self.n_train();
        let mut dkc = DMatrix::zeros(n, p);
        let mut buf = vec![0.0; p];
        for (i, xi) in self.train.iter().enumerate() {
            self.kernel.gradient(x, xi, &mut buf);
            for d in 0..p {
                dkc[(i, d)] = buf[d];
            }
        }
        let mean_grad: Vec<f64> = (0..p).map(|d| dkc.column(d).sum() / n as f64).collect();
        for d in 0..p {
            dkc.column_mut(d).add_scalar_mut(-mean_grad[d]);
        }
        let jac = self.projection.transpose() * dkc;
        self.kernel.diag_gradient(x, &mut buf);
        let dself = (0..p).map(|d| buf[d] - 2.0 * mean_grad[d]).collect();
        (jac, dself)
    }

    /// `C_d = Σ_h (t_h/λ_h) ∂t_h/∂x_d`, which equals `½ ∂T²/∂x_d`.
    pub fn t2_contributions(&self, x: &[f64]) -> Result<ContributionVector> {
        let t = self.score(x)?;
        let (jac, _) = self.score_jacobian(x);
        Ok(ContributionVector(
            (0..self.dim())
                .map(|d| {
                    (0..t.len())
                        .map(|h| t[h] / self.eigenvalues[h] * jac[(h, d)])
                        .sum()
                })
                .collect(),
        ))
    }

    /// `C_d = ∂SPE/∂x_d` of the unclamped residual statistic.
    pub fn spe_contributions(&self, x: &[f64]) -> Result<ContributionVector> {
        let t = self.score(x)?;
        let (jac, dself) = self.score_jacobian(x);
        Ok(ContributionVector(
            (0..self.dim())
                .map(|d| dself[d] - 2.0 * (0..t.len()).map(|h| t[h] * jac[(h, d)]).sum::<f64>())
                .collect(),
        ))
    }
}

fn spe_from_parts(kc_self: f64, t: &[f64]) -> f64 {
    (kc_self - t.iter().map(|v| v * v).sum::<f64>()).max(0.0)
}

/// Minimum number of healthy samples for empirical limits.
pub const MIN_LIMIT_SAMPLES: usize = 20;

/// Empirical (linear-interpolation) quantiles of healthy T² and SPE.
pub fn control_limits(healthy: &MonitoringStatistics, confidence: f64) -> Result<ControlLimits> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Input(format!("confidence {confidence} outside (0, 1)")));
    }
    let n = healthy.t2.len();
    if n < MIN_LIMIT_SAMPLES || healthy.spe.len() != n {
        return Err(Error::Input(format!(
            "control limits need at least {MIN_LIMIT_SAMPLES} healthy samples, got {n}"
        )));
    }
    let t2_limit = stats::quantile(&healthy.t2, confidence);
    let spe_limit = stats::quantile(&healthy.spe, confidence);
    if !(t2_limit > 0.0 && spe_limit > 0.0) {
        return Err(Error::Degenerate(format!(
            "non-positive control limit (T² {t2_limit}, SPE {spe_limit})"
        )));
    }
    Ok(ControlLimits {
        t2_limit,
        spe_limit,
        confidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KernelParams, KernelSpec};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn se(l: f64) -> SeKernel {
        KernelSpec::se(2).build(&KernelParams::from_natural(&[l], 1.0, 0.1)).unwrap()
    }

    fn random_rows(n: usize, p: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..p).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
    }

    #[test]
    fn three_points_full_rank() {
        let x = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]];
        let m = fit_kpca_rows(x.clone(), se(1.0), RetainPolicy::Fixed(2)).unwrap();
        assert_eq!(m.n_components(), 2);
        assert!(m.eigenvalues().iter().all(|l| *l > 0.0));
        let (kc, _) = center_train_gram(&gram_from_rows(m.kernel(), &x).unwrap()).unwrap();
        let u = m.eigenvectors();
        let recon = u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(m.eigenvalues().to_vec())) * u.transpose();
        assert!((recon - kc).abs().max() < 1e-8);
    }

    #[test]
    fn duplicated_rows_keep_nonzero_count() {
        let base = random_rows(6, 2, 3);
        let mut doubled = base.clone();
        doubled.extend(base.clone());
        let a = fit_kpca_rows(base, se(1.2), RetainPolicy::Fixed(100)).unwrap();
        let b = fit_kpca_rows(doubled, se(1.2), RetainPolicy::Fixed(100)).unwrap();
        assert_eq!(a.rank(), 5);
        assert_eq!(a.rank(), b.rank());
    }

    #[test]
    fn eigenpairs_are_orthonormal_and_sorted() {
        let x = random_rows(30, 2, 9);
        let m = fit_kpca_rows(x.clone(), se(0.8), RetainPolicy::default()).unwrap();
        let u = m.eigenvectors();
        let gram = u.transpose() * u;
        assert!((gram - DMatrix::identity(m.n_components(), m.n_components())).abs().max() < 1e-8);
        assert!(m.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
        let (kc, _) = center_train_gram(&gram_from_rows(m.kernel(), &x).unwrap()).unwrap();
        let lhs = &kc * u;
        let rhs = u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(m.eigenvalues().to_vec()));
        assert!((lhs - rhs).abs().max() < 1e-6);
        // 95% policy: r is the smallest count reaching the threshold
        let total: f64 = m.spectrum().iter().sum();
        let r = m.n_components();
        assert!(m.spectrum()[..r].iter().sum::<f64>() >= 0.95 * total);
        assert!(m.spectrum()[..r - 1].iter().sum::<f64>() < 0.95 * total);
    }

    #[test]
    fn degenerate_data_is_rejected() {
        let x = vec![vec![1.0, 1.0]; 5];
        assert!(matches!(
            fit_kpca_rows(x, se(1.0), RetainPolicy::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn training_rows_reproduce_training_scores() {
        let x = random_rows(25, 2, 1);
        let m = fit_kpca_rows(x.clone(), se(1.0), RetainPolicy::Fixed(4)).unwrap();
        let t = m.training_scores();
        let mut mean = vec![0.0; 4];
        for (i, xi) in x.iter().enumerate() {
            let s = m.score(xi).unwrap();
            for h in 0..4 {
                assert_relative_eq!(s[h], t[(i, h)], epsilon = 1e-8);
                mean[h] += s[h] / x.len() as f64;
            }
        }
        assert!(mean.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn training_mean_t2_is_r_over_n() {
        let x = random_rows(40, 2, 5);
        let m = fit_kpca_rows(x.clone(), se(1.0), RetainPolicy::Fixed(5)).unwrap();
        let s = m.monitor_rows(&x).unwrap();
        let mean = stats::mean(&s.t2);
        assert_relative_eq!(mean, 5.0 / 40.0, epsilon = 1e-6);
    }

    #[test]
    fn t2_formula() {
        let x = random_rows(10, 2, 2);
        let m = fit_kpca_rows(x, se(1.0), RetainPolicy::Fixed(2)).unwrap();
        assert_eq!(m.t2_statistic(&[0.0, 0.0]), 0.0);
        let l = m.eigenvalues();
        let expected = 1.0 / l[0] + 4.0 / l[1];
        assert_relative_eq!(m.t2_statistic(&[1.0, 2.0]), expected, max_relative = 1e-15);
    }

    #[test]
    fn hand_built_three_point_model() {
        // Oracle computed by hand for points 0, 1, 3 on a line with ℓ = 1, s_f = 1.
        let x = vec![vec![0.0], vec![1.0], vec![3.0]];
        let k = KernelSpec::se(1).build(&KernelParams::from_natural(&[1.0], 1.0, 0.1)).unwrap();
        let m = fit_kpca_rows(x.clone(), k.clone(), RetainPolicy::Fixed(1)).unwrap();

        let kf = |a: f64, b: f64| (-0.5 * (a - b) * (a - b)).exp();
        let pts = [0.0, 1.0, 3.0];
        let gram = DMatrix::from_fn(3, 3, |i, j| kf(pts[i], pts[j]));
        let one = DMatrix::from_element(3, 3, 1.0 / 3.0);
        let kc = &gram - &one * &gram - &gram * &one + &one * &gram * &one;
        let eig = SymmetricEigen::new(kc.clone());
        let (mut top, mut idx) = (f64::MIN, 0);
        for i in 0..3 {
            if eig.eigenvalues[i] > top {
                top = eig.eigenvalues[i];
                idx = i;
            }
        }
        let mut u = eig.eigenvectors.column(idx).clone_owned();
        let arg = (0..3).max_by(|&a, &b| u[a].abs().total_cmp(&u[b].abs())).unwrap();
        if u[arg] < 0.0 {
            u.neg_mut();
        }
        assert_relative_eq!(m.eigenvalues()[0], top, max_relative = 1e-12);

        let z = 0.5;
        let kv: Vec<f64> = pts.iter().map(|p| kf(z, *p)).collect();
        let kbar = kv.iter().sum::<f64>() / 3.0;
        let rm: Vec<f64> = (0..3).map(|i| gram.row(i).sum() / 3.0).collect();
        let g = rm.iter().sum::<f64>() / 3.0;
        let kc_z: Vec<f64> = (0..3).map(|i| kv[i] - kbar - rm[i] + g).collect();
        let t = (0..3).map(|i| kc_z[i] * u[i]).sum::<f64>() / top.sqrt();
        let spe = (1.0 - 2.0 * kbar + g) - t * t;

        let s = m.score(&[z]).unwrap();
        assert_relative_eq!(s[0], t, max_relative = 1e-10);
        assert_relative_eq!(m.spe_statistic(&[z], &s).unwrap(), spe, max_relative = 1e-10);

        // ∂t/∂x by the chain rule through the centered kernel vector
        let dk: Vec<f64> = pts.iter().map(|p| -kf(z, *p) * (z - p)).collect();
        let dbar = dk.iter().sum::<f64>() / 3.0;
        let dt = (0..3).map(|i| (dk[i] - dbar) * u[i]).sum::<f64>() / top.sqrt();
        let c = m.t2_contributions(&[z]).unwrap();
        assert_relative_eq!(c.0[0], t / top * dt, max_relative = 1e-10);
    }

    #[test]
    fn spe_edge_cases() {
        let x = random_rows(12, 2, 4);
        let full = fit_kpca_rows(x.clone(), se(1.0), RetainPolicy::Fixed(usize::MAX)).unwrap();
        for xi in &x {
            let e = full.evaluate(xi).unwrap();
            assert!(e.spe.abs() < 1e-8);
        }
        let empty = full.with_components(0);
        let z = [0.3, -0.1];
        let (_, kc_self) = empty.centered_kernel(&z).unwrap();
        assert_eq!(empty.evaluate(&z).unwrap().spe, kc_self.max(0.0));
        // contributions vanish at a training row with the full subspace
        let c = full.spe_contributions(&x[3]).unwrap();
        assert!(c.0.iter().all(|v| v.abs() < 1e-6), "{:?}", c.0);
    }

    #[test]
    fn spe_non_increasing_in_r() {
        let x = random_rows(20, 2, 8);
        let m = fit_kpca_rows(x, se(0.9), RetainPolicy::Fixed(usize::MAX)).unwrap();
        let z = [0.7, 1.1];
        let mut prev = f64::INFINITY;
        for r in 0..=m.rank() {
            let spe = m.with_components(r).evaluate(&z).unwrap().spe;
            assert!(spe <= prev + 1e-10);
            prev = spe;
        }
    }

    #[test]
    fn contributions_at_zero_scores() {
        // the leading component of symmetric 1-D data is odd, so the origin scores zero
        let x = vec![vec![-2.0], vec![-1.0], vec![1.0], vec![2.0]];
        let k = KernelSpec::se(1).build(&KernelParams::from_natural(&[10.0], 1.0, 0.1)).unwrap();
        let m = fit_kpca_rows(x, k, RetainPolicy::Fixed(1)).unwrap();
        let t = m.score(&[0.0]).unwrap();
        assert!(t.iter().all(|v| v.abs() < 1e-10), "{t:?}");
        let c = m.t2_contributions(&[0.0]).unwrap();
        assert!(c.0.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn contributions_vanish_for_huge_lengthscales() {
        let x = random_rows(15, 2, 6);
        let m = fit_kpca_rows(x, se(1e4), RetainPolicy::Fixed(2)).unwrap();
        let c = m.spe_contributions(&[0.5, 0.5]).unwrap();
        assert!(c.0.iter().all(|v| v.abs() < 1e-6), "{:?}", c.0);
    }

    #[test]
    fn limits_from_quantiles() {
        let s = MonitoringStatistics {
            t2: (1..=100).map(f64::from).collect(),
            spe: vec![5.0; 100],
        };
        let l = control_limits(&s, 0.99).unwrap();
        assert_relative_eq!(l.t2_limit, 99.01, epsilon = 1e-12);
        assert_eq!(l.spe_limit, 5.0);
        let median = control_limits(&s, 0.5).unwrap();
        assert_relative_eq!(median.t2_limit, 50.5, epsilon = 1e-12);
        assert!(control_limits(&s, 0.9).unwrap().t2_limit <= l.t2_limit);

        let short = MonitoringStatistics {
            t2: vec![1.0; 10],
            spe: vec![1.0; 10],
        };
        assert!(control_limits(&short, 0.99).is_err());
        assert!(control_limits(&s, 1.0).is_err());
    }

    #[test]
    fn retain_policy_parsing() {
        assert_eq!("fixed:3".parse::<RetainPolicy>().unwrap(), RetainPolicy::Fixed(3));
        assert_eq!("frac:0.9".parse::<RetainPolicy>().unwrap(), RetainPolicy::Fraction(0.9));
        assert!("frac:1.5".parse::<RetainPolicy>().is_err());
        assert!("nope".parse::<RetainPolicy>().is_err());
    }
}

//! Squared-exponential kernels (isotropic and ARD), Gram matrices, feature-space
//! centering and input gradients.
//!
//! Parameters are carried in log scale everywhere and only exponentiated when a
//! concrete [`SeKernel`] is built. The noise standard deviation travels with the
//! parameters but never enters the kernel itself; likelihoods consume it.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelFamily {
    /// Isotropic squared exponential, one lengthscale.
    Se,
    /// Automatic relevance determination, one lengthscale per input variable.
    Ard,
}

impl KernelFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            KernelFamily::Se => "se",
            KernelFamily::Ard => "ard",
        }
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "se" => Ok(KernelFamily::Se),
            "ard" => Ok(KernelFamily::Ard),
            other => Err(Error::Input(format!("unknown kernel family '{other}'"))),
        }
    }
}

/// Kernel family together with the input dimension it operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub dim: usize,
}

impl KernelSpec {
    pub fn se(dim: usize) -> Self {
        Self {
            family: KernelFamily::Se,
            dim,
        }
    }

    pub fn ard(dim: usize) -> Self {
        Self {
            family: KernelFamily::Ard,
            dim,
        }
    }

    pub fn n_lengthscales(&self) -> usize {
        match self.family {
            KernelFamily::Se => 1,
            KernelFamily::Ard => self.dim,
        }
    }

    /// Length of the sampled log-parameter vector: lengthscales, signal sd, noise sd.
    pub fn n_params(&self) -> usize {
        self.n_lengthscales() + 2
    }

    /// Column names for the log-parameter vector, in storage order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = match self.family {
            KernelFamily::Se => vec!["log_lengthscale".to_string()],
            KernelFamily::Ard => (1..=self.dim)
                .map(|d| format!("log_lengthscale_{d}"))
                .collect(),
        };
        names.push("log_signal_sd".to_string());
        names.push("log_noise_sd".to_string());
        names
    }

    pub fn check_params(&self, params: &KernelParams) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Input("kernel dimension must be positive".into()));
        }
        if params.log_lengthscales.len() != self.n_lengthscales() {
            return Err(Error::Dimension {
                expected: self.n_lengthscales(),
                got: params.log_lengthscales.len(),
                context: "lengthscale count",
            });
        }
        let all_finite = params.log_lengthscales.iter().all(|v| v.is_finite())
            && params.log_signal_sd.is_finite()
            && params.log_noise_sd.is_finite();
        if !all_finite {
            return Err(Error::NonFinite("kernel parameters"));
        }
        Ok(())
    }

    /// Exponentiates the parameters into a ready-to-evaluate kernel.
    pub fn build(&self, params: &KernelParams) -> Result<SeKernel> {
        self.check_params(params)?;
        let lengthscales: Vec<f64> = match self.family {
            KernelFamily::Se => vec![params.log_lengthscales[0].exp(); self.dim],
            KernelFamily::Ard => params.log_lengthscales.iter().map(|v| v.exp()).collect(),
        };
        let signal_var = (2.0 * params.log_signal_sd).exp();
        if lengthscales.iter().any(|l| !(l.is_finite() && *l > 0.0))
            || !(signal_var.is_finite() && signal_var > 0.0)
        {
            return Err(Error::NonFinite("exponentiated kernel parameters"));
        }
        Ok(SeKernel {
            lengthscales,
            signal_var,
        })
    }
}

/// Kernel parameters in log scale.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub log_lengthscales: Vec<f64>,
    pub log_signal_sd: f64,
    pub log_noise_sd: f64,
}

impl KernelParams {
    pub fn new(log_lengthscales: Vec<f64>, log_signal_sd: f64, log_noise_sd: f64) -> Self {
        Self {
            log_lengthscales,
            log_signal_sd,
            log_noise_sd,
        }
    }

    /// Builds parameters from natural-scale values.
    pub fn from_natural(lengthscales: &[f64], signal_sd: f64, noise_sd: f64) -> Self {
        Self {
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_signal_sd: signal_sd.ln(),
            log_noise_sd: noise_sd.ln(),
        }
    }

    /// Unpacks a flat log-parameter vector laid out as `[log ℓ.., log s_f, log s_n]`.
    pub fn from_theta(spec: &KernelSpec, theta: &[f64]) -> Result<Self> {
        if theta.len() != spec.n_params() {
            return Err(Error::Dimension {
                expected: spec.n_params(),
                got: theta.len(),
                context: "log-parameter vector",
            });
        }
        let nl = spec.n_lengthscales();
        Ok(Self {
            log_lengthscales: theta[..nl].to_vec(),
            log_signal_sd: theta[nl],
            log_noise_sd: theta[nl + 1],
        })
    }

    pub fn to_theta(&self) -> Vec<f64> {
        let mut theta = self.log_lengthscales.clone();
        theta.push(self.log_signal_sd);
        theta.push(self.log_noise_sd);
        theta
    }

    pub fn signal_sd(&self) -> f64 {
        self.log_signal_sd.exp()
    }

    pub fn noise_sd(&self) -> f64 {
        self.log_noise_sd.exp()
    }

    pub fn noise_var(&self) -> f64 {
        (2.0 * self.log_noise_sd).exp()
    }
}

/// A positive semi-definite kernel on `R^p` with an input gradient.
pub trait Kernel: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, a: &[f64], b: &[f64]) -> f64;

    /// Writes `∂k(x, y)/∂x` into `out`.
    fn gradient(&self, x: &[f64], y: &[f64], out: &mut [f64]);

    /// Writes `d k(x, x)/dx` into `out`.
    fn diag_gradient(&self, x: &[f64], out: &mut [f64]);
}

/// Squared-exponential kernel with per-dimension lengthscales.
///
/// The isotropic case stores the single lengthscale repeated `p` times so both
/// families share one evaluation path.
#[derive(Debug, Clone, PartialEq)]
pub struct SeKernel {
    lengthscales: Vec<f64>,
    signal_var: f64,
}

impl SeKernel {
    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn signal_var(&self) -> f64 {
        self.signal_var
    }

    fn scaled_sq_dist(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| {
                let z = (x - y) / l;
                z * z
            })
            .sum()
    }
}

impl Kernel for SeKernel {
    fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        self.signal_var * (-0.5 * self.scaled_sq_dist(a, b)).exp()
    }

    fn gradient(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let k = self.eval(x, y);
        for (((o, xd), yd), l) in out.iter_mut().zip(x).zip(y).zip(&self.lengthscales) {
            *o = -k * (xd - yd) / (l * l);
        }
    }

    fn diag_gradient(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}

/// Linear kernel `k(x, y) = xᵀy`; K-PCA with it reduces to ordinary PCA.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearKernel {
    pub dim: usize,
}

impl Kernel for LinearKernel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn gradient(&self, _x: &[f64], y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(y);
    }

    fn diag_gradient(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().zip(x).for_each(|(o, v)| *o = 2.0 * v);
    }
}

/// Copies the rows of an `n × p` matrix into contiguous vectors.
pub fn rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows())
        .map(|i| x.row(i).iter().copied().collect())
        .collect()
}

/// Evaluates the kernel described by `spec`/`params` at one pair of points.
pub fn eval_kernel(spec: &KernelSpec, params: &KernelParams, xi: &[f64], xj: &[f64]) -> Result<f64> {
    if xi.len() != spec.dim || xj.len() != spec.dim {
        return Err(Error::Dimension {
            expected: spec.dim,
            got: if xi.len() != spec.dim { xi.len() } else { xj.len() },
            context: "kernel input",
        });
    }
    Ok(spec.build(params)?.eval(xi, xj))
}

/// Gram matrix over a set of rows. Rows are filled in parallel; each entry is
/// computed once and mirrored so the output is exactly symmetric.
pub fn gram_from_rows<K: Kernel + ?Sized>(kernel: &K, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::Input("gram matrix needs at least one row".into()));
    }
    for r in rows {
        if r.len() != kernel.dim() {
            return Err(Error::Dimension {
                expected: kernel.dim(),
                got: r.len(),
                context: "gram matrix row",
            });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gram matrix input"));
        }
    }
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i..n).map(|j| kernel.eval(&rows[i], &rows[j])).collect())
        .collect();
    let mut k = DMatrix::zeros(n, n);
    for (i, row) in upper.iter().enumerate() {
        for (off, v) in row.iter().enumerate() {
            let j = i + off;
            k[(i, j)] = *v;
            k[(j, i)] = *v;
        }
    }
    Ok(k)
}

pub fn gram_matrix<K: Kernel + ?Sized>(kernel: &K, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    gram_from_rows(kernel, &rows(x))
}

/// Means of the uncentered training Gram needed to center new kernel vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteringStats {
    pub row_means: Vec<f64>,
    pub grand_mean: f64,
    pub n_train: usize,
}

/// Double-centers a symmetric Gram matrix: `K - 1K - K1 + 1K1`.
pub fn center_train_gram(k: &DMatrix<f64>) -> Result<(DMatrix<f64>, CenteringStats)> {
    let n = k.nrows();
    if n == 0 || k.ncols() != n {
        return Err(Error::Input("centering needs a non-empty square matrix".into()));
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gram matrix"));
    }
    let nf = n as f64;
    let row_means: Vec<f64> = (0..n).map(|i| k.row(i).iter().sum::<f64>() / nf).collect();
    let grand_mean = row_means.iter().sum::<f64>() / nf;
    let kc = DMatrix::from_fn(n, n, |i, j| k[(i, j)] - (row_means[i] + row_means[j]) + grand_mean);
    Ok((
        kc,
        CenteringStats {
            row_means,
            grand_mean,
            n_train: n,
        },
    ))
}

/// Centers a test kernel vector `k(x, x_i)` and its self-similarity `k(x, x)`
/// with the training means.
pub fn center_test_vector(k_vec: &[f64], k_self: f64, stats: &CenteringStats) -> Result<(Vec<f64>, f64)> {
    if k_vec.len() != stats.n_train {
        return Err(Error::Dimension {
            expected: stats.n_train,
            got: k_vec.len(),
            context: "test kernel vector",
        });
    }
    let mean_k = k_vec.iter().sum::<f64>() / stats.n_train as f64;
    let centered = k_vec
        .iter()
        .zip(&stats.row_means)
        .map(|(k, rm)| k - (mean_k + rm) + stats.grand_mean)
        .collect();
    let self_c = k_self - 2.0 * mean_k + stats.grand_mean;
    Ok((centered, self_c))
}

/// `G[i][d] = ∂k(x, x_i)/∂x_d` for every training row.
pub fn kernel_gradient<K: Kernel + ?Sized>(kernel: &K, x: &[f64], train: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let p = kernel.dim();
    if x.len() != p {
        return Err(Error::Dimension {
            expected: p,
            got: x.len(),
            context: "gradient point",
        });
    }
    let mut g = DMatrix::zeros(train.len(), p);
    let mut buf = vec![0.0; p];
    for (i, xi) in train.iter().enumerate() {
        if xi.len() != p {
            return Err(Error::Dimension {
                expected: p,
                got: xi.len(),
                context: "training row",
            });
        }
        kernel.gradient(x, xi, &mut buf);
        for d in 0..p {
            g[(i, d)] = buf[d];
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn se(l: f64, sf: f64, p: usize) -> (KernelSpec, KernelParams) {
        (KernelSpec::se(p), KernelParams::from_natural(&[l], sf, 0.1))
    }

    #[test]
    fn zero_distance_gives_signal_variance() {
        let (spec, params) = se(0.7, 1.3, 3);
        let x = [0.2, -1.0, 4.0];
        assert_relative_eq!(eval_kernel(&spec, &params, &x, &x).unwrap(), 1.3 * 1.3, max_relative = 1e-14);
    }

    #[test]
    fn se_unit_offset() {
        let (spec, params) = se(1.0, 1.0, 2);
        let v = eval_kernel(&spec, &params, &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_relative_eq!(v, 0.606_530_659_712_633_4, max_relative = 1e-12);
    }

    #[test]
    fn ard_two_lengthscales() {
        let spec = KernelSpec::ard(2);
        let params = KernelParams::from_natural(&[1.0, 2.0], 2.0, 0.1);
        let v = eval_kernel(&spec, &params, &[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_relative_eq!(v, 4.0 * (-1.0f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(v, 1.471_517_764_685_769, max_relative = 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let (spec, params) = se(1.0, 1.0, 2);
        assert!(matches!(
            eval_kernel(&spec, &params, &[1.0], &[0.0, 0.0]),
            Err(Error::Dimension { .. })
        ));
        let ard = KernelSpec::ard(3);
        assert!(ard.build(&KernelParams::from_natural(&[1.0, 1.0], 1.0, 0.1)).is_err());
        assert!(KernelSpec::se(2)
            .build(&KernelParams::from_natural(&[1.0, 1.0], 1.0, 0.1))
            .is_err());
    }

    #[test]
    fn theta_round_trip() {
        let spec = KernelSpec::ard(3);
        let theta = vec![0.1, 0.2, 0.3, -0.5, -2.0];
        let p = KernelParams::from_theta(&spec, &theta).unwrap();
        assert_eq!(p.log_lengthscales, vec![0.1, 0.2, 0.3]);
        assert_eq!(p.to_theta(), theta);
        assert!(KernelParams::from_theta(&spec, &theta[..4]).is_err());
    }

    #[test]
    fn gram_single_row_and_duplicates() {
        let (spec, params) = se(1.0, 1.5, 2);
        let k = spec.build(&params).unwrap();
        let g = gram_matrix(&k, &DMatrix::from_row_slice(1, 2, &[0.3, 0.4])).unwrap();
        assert_eq!(g.shape(), (1, 1));
        assert_relative_eq!(g[(0, 0)], 2.25, max_relative = 1e-14);

        let g = gram_matrix(&k, &DMatrix::from_row_slice(2, 2, &[0.3, 0.4, 0.3, 0.4])).unwrap();
        assert_relative_eq!(g[(0, 1)], 2.25, max_relative = 1e-14);
        assert!(g.determinant().abs() < 1e-12);
    }

    #[test]
    fn gram_matches_entrywise_loop() {
        let (spec, params) = se(0.8, 1.1, 3);
        let x = DMatrix::from_row_slice(3, 3, &[0.1, 0.5, -0.3, 1.2, -0.7, 0.0, -0.4, 0.9, 2.0]);
        let g = gram_matrix(&spec.build(&params).unwrap(), &x).unwrap();
        let r = rows(&x);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(g[(i, j)], eval_kernel(&spec, &params, &r[i], &r[j]).unwrap());
            }
        }
    }

    #[test]
    fn gram_rejects_non_finite() {
        let (spec, params) = se(1.0, 1.0, 2);
        let x = DMatrix::from_row_slice(2, 2, &[0.0, f64::NAN, 1.0, 1.0]);
        assert!(gram_matrix(&spec.build(&params).unwrap(), &x).is_err());
    }

    #[test]
    fn centering_constant_and_identity() {
        let (kc, _) = center_train_gram(&DMatrix::from_element(4, 4, 0.37)).unwrap();
        assert!(kc.iter().all(|v| v.abs() < 1e-15));

        let (kc, stats) = center_train_gram(&DMatrix::identity(2, 2)).unwrap();
        let expect = [0.5, -0.5, -0.5, 0.5];
        for (a, b) in kc.iter().zip(expect) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
        assert_eq!(stats.row_means, vec![0.5, 0.5]);
        assert_eq!(stats.grand_mean, 0.5);
    }

    #[test]
    fn centering_zeroes_row_sums() {
        let a = DMatrix::from_row_slice(4, 4, &[
            1.0, 0.3, -0.2, 0.5, //
            0.3, 2.0, 0.1, -0.4, //
            -0.2, 0.1, 1.5, 0.6, //
            0.5, -0.4, 0.6, 0.9,
        ]);
        let (kc, stats) = center_train_gram(&a).unwrap();
        for i in 0..4 {
            assert!(kc.row(i).sum().abs() < 1e-12);
            assert!(kc.column(i).sum().abs() < 1e-12);
        }
        let mean_rm = stats.row_means.iter().sum::<f64>() / 4.0;
        assert_relative_eq!(mean_rm, stats.grand_mean, max_relative = 1e-15);
    }

    #[test]
    fn test_vector_of_training_row_matches_centered_gram() {
        let (spec, params) = se(1.3, 0.9, 2);
        let k = spec.build(&params).unwrap();
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 1.0, 0.5, -1.0, 2.0, 0.3, -0.3]);
        let r = rows(&x);
        let (kc, stats) = center_train_gram(&gram_matrix(&k, &x).unwrap()).unwrap();
        for j in 0..4 {
            let kv: Vec<f64> = r.iter().map(|xi| k.eval(&r[j], xi)).collect();
            let (c, cs) = center_test_vector(&kv, k.eval(&r[j], &r[j]), &stats).unwrap();
            for i in 0..4 {
                assert_relative_eq!(c[i], kc[(j, i)], epsilon = 1e-15);
            }
            assert_relative_eq!(cs, kc[(j, j)], epsilon = 1e-15);
        }
    }

    #[test]
    fn test_vector_constant_annihilation() {
        let stats = CenteringStats {
            row_means: vec![0.4; 5],
            grand_mean: 0.4,
            n_train: 5,
        };
        let (c, _) = center_test_vector(&[0.4; 5], 1.0, &stats).unwrap();
        assert!(c.iter().all(|v| v.abs() < 1e-16));
        assert!(center_test_vector(&[0.4; 4], 1.0, &stats).is_err());
    }

    #[test]
    fn test_vector_matches_augmented_gram() {
        // Oracle: feature-space mean removal written out on the (n+1)-point Gram,
        // with means taken over the n training points only.
        let (spec, params) = se(0.9, 1.2, 3);
        let k = spec.build(&params).unwrap();
        let train = vec![
            vec![0.1, 0.2, 0.3],
            vec![-0.5, 1.0, 0.0],
            vec![1.5, -0.2, 0.8],
            vec![0.0, 0.0, -1.0],
            vec![0.7, 0.7, 0.7],
        ];
        let x = vec![0.4, -0.1, 0.2];
        let mut all = train.clone();
        all.push(x.clone());
        let n = train.len();
        let aug = DMatrix::from_fn(n + 1, n + 1, |i, j| k.eval(&all[i], &all[j]));
        let mean_row = |i: usize| (0..n).map(|j| aug[(i, j)]).sum::<f64>() / n as f64;
        let grand = (0..n).map(mean_row).sum::<f64>() / n as f64;
        let oracle: Vec<f64> = (0..n)
            .map(|i| aug[(n, i)] - mean_row(n) - mean_row(i) + grand)
            .collect();
        let oracle_self = aug[(n, n)] - 2.0 * mean_row(n) + grand;

        let (_, stats) = center_train_gram(&gram_from_rows(&k, &train).unwrap()).unwrap();
        let kv: Vec<f64> = train.iter().map(|t| k.eval(&x, t)).collect();
        let (c, cs) = center_test_vector(&kv, k.eval(&x, &x), &stats).unwrap();
        for (a, b) in c.iter().zip(&oracle) {
            assert_relative_eq!(*a, *b, epsilon = 1e-14);
        }
        assert_relative_eq!(cs, oracle_self, epsilon = 1e-14);
    }

    #[test]
    fn gradient_unit_offset() {
        let (spec, params) = se(1.0, 1.0, 2);
        let k = spec.build(&params).unwrap();
        let g = kernel_gradient(&k, &[1.0, 0.0], &[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_relative_eq!(g[(0, 0)], -(-0.5f64).exp(), max_relative = 1e-14);
        assert_eq!(g[(0, 1)], 0.0);
        assert_eq!(g[(1, 0)], 0.0);
        assert_eq!(g[(1, 1)], 0.0);
    }

    #[test]
    fn ard_with_equal_lengthscales_matches_se() {
        let x = DMatrix::from_fn(6, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.37 - 0.6);
        let se_k = KernelSpec::se(3).build(&KernelParams::from_natural(&[1.7], 0.8, 0.1)).unwrap();
        let ard_k = KernelSpec::ard(3)
            .build(&KernelParams::from_natural(&[1.7, 1.7, 1.7], 0.8, 0.1))
            .unwrap();
        let a = gram_matrix(&se_k, &x).unwrap();
        let b = gram_matrix(&ard_k, &x).unwrap();
        assert!((a - b).abs().max() <= 1e-14);
    }

    fn point(p: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0f64..3.0, p)
    }

    proptest! {
        #[test]
        fn kernel_is_symmetric_and_bounded(a in point(3), b in point(3), ll in -1.0f64..1.5, lsf in -1.0f64..1.0) {
            let spec = KernelSpec::se(3);
            let params = KernelParams::new(vec![ll], lsf, -2.0);
            let kab = eval_kernel(&spec, &params, &a, &b).unwrap();
            let kba = eval_kernel(&spec, &params, &b, &a).unwrap();
            prop_assert_eq!(kab, kba);
            let sf2 = (2.0 * lsf).exp();
            prop_assert!(kab > 0.0 || a != b);
            prop_assert!(kab <= sf2 * (1.0 + 1e-15));
        }

        #[test]
        fn kernel_increases_towards_signal_variance(a in point(2), b in point(2)) {
            let spec = KernelSpec::se(2);
            let mut prev = 0.0;
            for step in 0..12 {
                let params = KernelParams::new(vec![-1.0 + step as f64], 0.3, -2.0);
                let v = eval_kernel(&spec, &params, &a, &b).unwrap();
                prop_assert!(v >= prev);
                prev = v;
            }
            prop_assert!(((0.6f64).exp() - prev).abs() < 1e-6);
        }

        #[test]
        fn gradient_matches_central_differences(
            x in point(3), y in point(3),
            ls in proptest::collection::vec(-0.5f64..1.0, 3), lsf in -0.5f64..0.5,
        ) {
            let k = KernelSpec::ard(3).build(&KernelParams::new(ls, lsf, -2.0)).unwrap();
            let mut g = vec![0.0; 3];
            k.gradient(&x, &y, &mut g);
            let h = 1e-5;
            for d in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[d] += h;
                xm[d] -= h;
                let fd = (k.eval(&xp, &y) - k.eval(&xm, &y)) / (2.0 * h);
                let scale = g[d].abs().max(1e-4);
                prop_assert!((fd - g[d]).abs() / scale < 1e-5, "d={} fd={} g={}", d, fd, g[d]);
            }
        }

        #[test]
        fn centered_gram_rows_sum_to_zero(x in proptest::collection::vec(point(2), 3..12), ll in -0.5f64..1.0) {
            let k = KernelSpec::se(2).build(&KernelParams::new(vec![ll], 0.0, -2.0)).unwrap();
            let (kc, _) = center_train_gram(&gram_from_rows(&k, &x).unwrap()).unwrap();
            for i in 0..x.len() {
                prop_assert!(kc.row(i).sum().abs() <= 1e-10);
                prop_assert!(kc.column(i).sum().abs() <= 1e-10);
            }
        }
    }
}

//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments. Every key can also be set from the
//! command line. Relative paths are resolved against the directory of the
//! config file that declared them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use kmspc_core::calibration::OptimizerMethod;
use kmspc_core::kernels::KernelFamily;
use kmspc_core::kpca::RetainPolicy;
use kmspc_core::mcmc::SamplerKind;
use kmspc_core::metrics::AucSource;
use kmspc_core::unsupervised::UnsupervisedMethod;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Gpc,
    Kpcr,
    Unsupervised(UnsupervisedMethod),
}

impl std::fmt::Display for Route {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Gpc => f.write_str("gpc"),
            Self::Kpcr => f.write_str("kpcr"),
            Self::Unsupervised(m) => write!(f, "unsupervised:{m}"),
        }
    }
}

impl FromStr for Route {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "gpc" => Ok(Self::Gpc),
            "kpcr" => Ok(Self::Kpcr),
            other => match other.strip_prefix("unsupervised:") {
                Some(m) => Ok(Self::Unsupervised(m.parse()?)),
                None => Err(CliError::Config(format!("unknown route '{s}'"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub kernel: KernelFamily,
    pub route: Route,
    pub optimizer: OptimizerMethod,
    pub max_iters: Option<usize>,
    pub sampler: SamplerKind,
    pub draws: Option<usize>,
    /// Fraction of the chain discarded as burn-in.
    pub burn_in: Option<f64>,
    /// One value for every log-parameter, or one per parameter.
    pub prior_sd: Vec<f64>,
    pub retain: RetainPolicy,
    pub confidence: f64,
    pub credible: f64,
    pub seed: u64,
    pub workers: usize,
    pub healthy: Option<PathBuf>,
    pub monitor: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub out: PathBuf,
    pub delimiter: u8,
    pub label_column: String,
    pub time_column: String,
    pub contrib_offset: usize,
    pub contrib_times: Vec<usize>,
    pub step_size: Option<f64>,
    pub n_leapfrog: Option<usize>,
    pub max_tree_depth: Option<usize>,
    pub stage2_scale: f64,
    pub adapt_start: usize,
    pub init_cov_scale: f64,
    pub epsilon_reg: f64,
    pub kpcr_sigma: Option<f64>,
    pub auc_source: AucSource,
    pub record_timings: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            kernel: KernelFamily::Se,
            route: Route::Gpc,
            optimizer: OptimizerMethod::Lbfgs,
            max_iters: None,
            sampler: SamplerKind::Dram,
            draws: None,
            burn_in: None,
            prior_sd: vec![kmspc_core::mcmc::DEFAULT_PRIOR_SD],
            retain: RetainPolicy::default(),
            confidence: 0.99,
            credible: 0.05,
            seed: 0,
            workers: 0,
            healthy: None,
            monitor: None,
            calibration: None,
            out: PathBuf::from("out"),
            delimiter: b',',
            label_column: "label".into(),
            time_column: "time".into(),
            contrib_offset: 0,
            contrib_times: Vec::new(),
            step_size: None,
            n_leapfrog: None,
            max_tree_depth: None,
            stage2_scale: 0.2,
            adapt_start: 200,
            init_cov_scale: 0.1,
            epsilon_reg: 1e-6,
            kpcr_sigma: None,
            auc_source: AucSource::Max,
            record_timings: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    let v = value.trim();
    if v.is_empty() || v == "auto" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

fn show_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn resolve(base: &Path, value: &str) -> PathBuf {
    let p = PathBuf::from(value.trim());
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

/// An empty value leaves the dataset unset.
fn resolve_opt(base: &Path, value: &str) -> Option<PathBuf> {
    (!value.trim().is_empty()).then(|| resolve(base, value))
}

impl RunConfig {
    /// Sets one key; relative paths are resolved against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let key = key.trim();
        match key {
            "kernel" => self.kernel = value.trim().parse()?,
            "route" => self.route = value.parse()?,
            "optimizer" => self.optimizer = value.trim().parse()?,
            "max_iters" => self.max_iters = parse_opt(key, value)?,
            "sampler" => self.sampler = value.trim().parse()?,
            "draws" => self.draws = parse_opt(key, value)?,
            "burn_in" => self.burn_in = parse_opt(key, value)?,
            "prior_sd" => self.prior_sd = parse_list(key, value)?,
            "retain" => self.retain = value.trim().parse()?,
            "confidence" => self.confidence = parse(key, value)?,
            "credible" => self.credible = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "healthy" => self.healthy = resolve_opt(base, value),
            "monitor" => self.monitor = resolve_opt(base, value),
            "calibration" => self.calibration = resolve_opt(base, value),
            "out" => self.out = resolve(base, value),
            "delimiter" => {
                let v = value.trim();
                self.delimiter = match v {
                    "tab" | "\\t" => b'\t',
                    _ if v.len() == 1 => v.as_bytes()[0],
                    _ => return Err(CliError::Config(format!("delimiter must be one character, got '{v}'"))),
                }
            }
            "label_column" => self.label_column = value.trim().to_string(),
            "time_column" => self.time_column = value.trim().to_string(),
            "contrib_offset" => self.contrib_offset = parse(key, value)?,
            "contrib_times" => self.contrib_times = parse_list(key, value)?,
            "step_size" => self.step_size = parse_opt(key, value)?,
            "n_leapfrog" => self.n_leapfrog = parse_opt(key, value)?,
            "max_tree_depth" => self.max_tree_depth = parse_opt(key, value)?,
            "stage2_scale" => self.stage2_scale = parse(key, value)?,
            "adapt_start" => self.adapt_start = parse(key, value)?,
            "init_cov_scale" => self.init_cov_scale = parse(key, value)?,
            "epsilon_reg" => self.epsilon_reg = parse(key, value)?,
            "kpcr_sigma" => self.kpcr_sigma = parse_opt(key, value)?,
            "auc_source" => self.auc_source = value.trim().parse()?,
            "record_timings" => self.record_timings = parse(key, value)?,
            other => return Err(CliError::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies a `key = value` file on top of the current values.
    pub fn apply_text(&mut self, text: &str, base: &Path) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", no + 1)))?;
            self.set(k, v, base)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::default();
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.apply_text(&text, base)?;
        Ok(cfg)
    }

    /// Every key with its resolved value, sorted by key.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or_else(String::new, |p| p.display().to_string());
        let delimiter = if self.delimiter == b'\t' {
            "tab".to_string()
        } else {
            (self.delimiter as char).to_string()
        };
        [
            ("kernel", self.kernel.as_str().to_string()),
            ("route", self.route.to_string()),
            ("optimizer", self.optimizer.as_str().to_string()),
            ("max_iters", show_opt(&self.max_iters)),
            ("sampler", self.sampler.to_string()),
            ("draws", show_opt(&self.draws)),
            ("burn_in", show_opt(&self.burn_in)),
            ("prior_sd", show_list(&self.prior_sd)),
            ("retain", self.retain.to_string()),
            ("confidence", self.confidence.to_string()),
            ("credible", self.credible.to_string()),
            ("seed", self.seed.to_string()),
            ("workers", self.workers.to_string()),
            ("healthy", path(&self.healthy)),
            ("monitor", path(&self.monitor)),
            ("calibration", path(&self.calibration)),
            ("out", self.out.display().to_string()),
            ("delimiter", delimiter),
            ("label_column", self.label_column.clone()),
            ("time_column", self.time_column.clone()),
            ("contrib_offset", self.contrib_offset.to_string()),
            ("contrib_times", show_list(&self.contrib_times)),
            ("step_size", show_opt(&self.step_size)),
            ("n_leapfrog", show_opt(&self.n_leapfrog)),
            ("max_tree_depth", show_opt(&self.max_tree_depth)),
            ("stage2_scale", self.stage2_scale.to_string()),
            ("adapt_start", self.adapt_start.to_string()),
            ("init_cov_scale", self.init_cov_scale.to_string()),
            ("epsilon_reg", self.epsilon_reg.to_string()),
            ("kpcr_sigma", show_opt(&self.kpcr_sigma)),
            (
                "auc_source",
                match self.auc_source {
                    AucSource::Max => "max",
                    AucSource::T2 => "t2",
                    AucSource::Spe => "spe",
                }
                .to_string(),
            ),
            ("record_timings", self.record_timings.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Chain length: the configured value or the sampler default.
    pub fn n_draws(&self) -> usize {
        self.draws.unwrap_or(match self.sampler {
            SamplerKind::Am | SamplerKind::Dram => 5000,
            SamplerKind::Hmc | SamplerKind::Nuts => 1000,
        })
    }

    /// Number of leading draws discarded.
    pub fn burn_in_count(&self) -> usize {
        let frac = self.burn_in.unwrap_or(match self.sampler {
            SamplerKind::Am | SamplerKind::Dram => 0.4,
            SamplerKind::Hmc | SamplerKind::Nuts => 0.2,
        });
        (frac * self.n_draws() as f64).floor() as usize
    }

    /// Rejects combinations the workflow does not define.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CliError::Config(m));
        if matches!(self.route, Route::Unsupervised(_)) && self.kernel == KernelFamily::Ard {
            return fail("the unsupervised route tunes a single lengthscale; ARD kernels are not supported".into());
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return fail(format!("confidence {} outside (0, 1)", self.confidence));
        }
        if !(self.credible > 0.0 && self.credible < 1.0) {
            return fail(format!("credible level {} outside (0, 1)", self.credible));
        }
        if let Some(b) = self.burn_in {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("burn-in fraction {b} outside [0, 1)"));
            }
        }
        if self.n_draws() == 0 {
            return fail("draws must be at least 1".into());
        }
        if self.prior_sd.is_empty() || self.prior_sd.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return fail("prior_sd must be positive".into());
        }
        if !matches!(self.route, Route::Unsupervised(_)) && self.calibration.is_none() {
            return fail(format!("route '{}' needs a labelled 'calibration' dataset", self.route));
        }
        if self.healthy.is_none() {
            return fail("missing 'healthy' dataset".into());
        }
        Ok(())
    }

    /// Prior sds expanded to `m` parameters.
    pub fn prior_sds(&self, m: usize) -> Result<Vec<f64>> {
        match self.prior_sd.len() {
            1 => Ok(vec![self.prior_sd[0]; m]),
            k if k == m => Ok(self.prior_sd.clone()),
            k => Err(CliError::Config(format!("prior_sd has {k} values, expected 1 or {m}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "# comment\nkernel = ard\nroute = unsupervised:m4\nsampler=nuts\nprior_sd = 0.3, 0.4\nhealthy = data/h.csv\n",
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(cfg.kernel, KernelFamily::Ard);
        assert_eq!(cfg.route, Route::Unsupervised(UnsupervisedMethod::M4));
        assert_eq!(cfg.prior_sd, vec![0.3, 0.4]);
        assert_eq!(cfg.healthy, Some(PathBuf::from("/base/data/h.csv")));
        assert!(cfg.validate().is_err());

        let entries = cfg.entries();
        let mut again = RunConfig::default();
        for (k, v) in &entries {
            again.set(k, v, Path::new("")).unwrap();
        }
        assert_eq!(again.entries(), entries);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("colour", "red", Path::new(".")).is_err());
        assert!(cfg.apply_text("kernel se", Path::new(".")).is_err());
    }

    #[test]
    fn burn_in_defaults() {
        let mut cfg = RunConfig::default();
        assert_eq!((cfg.n_draws(), cfg.burn_in_count()), (5000, 2000));
        cfg.sampler = SamplerKind::Nuts;
        assert_eq!((cfg.n_draws(), cfg.burn_in_count()), (1000, 200));
        cfg.draws = Some(1);
        cfg.burn_in = Some(0.0);
        assert_eq!(cfg.burn_in_count(), 0);
    }
}

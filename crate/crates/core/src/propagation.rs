//! Propagation of posterior draws through the monitoring model.
//!
//! Every retained draw refits K-PCA on the healthy data, recomputes its own
//! control limits and scores the monitored samples. Summaries across draws are
//! built from sorted values so the order of draws never matters.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{rows, KernelParams, KernelSpec};
use crate::kpca::{control_limits, fit_kpca_rows, ControlLimits, RetainPolicy};
use crate::stats;

/// Default credible level: 95% equal-tailed bands.
pub const DEFAULT_ALPHA: f64 = 0.05;
/// Largest tolerated fraction of draws that fail to produce a model.
pub const MAX_SKIP_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChartKind {
    T2,
    Spe,
}

impl ChartKind {
    pub const BOTH: [Self; 2] = [Self::T2, Self::Spe];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::T2 => "t2",
            Self::Spe => "spe",
        }
    }
}

impl std::fmt::Display for ChartKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ChartKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "t2" => Ok(Self::T2),
            "spe" => Ok(Self::Spe),
            other => Err(Error::Input(format!("unknown chart '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorConfig {
    pub policy: RetainPolicy,
    pub confidence: f64,
    /// Monitored-sample indices at which contributions are computed.
    pub timestamps: Vec<usize>,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            policy: RetainPolicy::default(),
            confidence: 0.99,
            timestamps: Vec::new(),
        }
    }
}

/// Contributions at one monitored sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Contributions {
    pub timestamp: usize,
    pub t2: Vec<f64>,
    pub spe: Vec<f64>,
}

/// The deterministic monitoring output at a single parameter value.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicChart {
    pub theta: Vec<f64>,
    pub t2: Vec<f64>,
    pub spe: Vec<f64>,
    pub limits: ControlLimits,
    pub n_components: usize,
    pub contributions: Vec<Contributions>,
}

impl DeterministicChart {
    pub fn series(&self, kind: ChartKind) -> &[f64] {
        match kind {
            ChartKind::T2 => &self.t2,
            ChartKind::Spe => &self.spe,
        }
    }

    pub fn limit(&self, kind: ChartKind) -> f64 {
        limit_of(&self.limits, kind)
    }

    /// Samples whose statistic exceeds the chart limit.
    pub fn alarms(&self, kind: ChartKind) -> Vec<bool> {
        let lim = self.limit(kind);
        self.series(kind).iter().map(|v| *v > lim).collect()
    }

    /// First sample alarming on either chart.
    pub fn first_alarm(&self) -> Option<usize> {
        let (a, b) = (self.alarms(ChartKind::T2), self.alarms(ChartKind::Spe));
        (0..a.len()).find(|&i| a[i] || b[i])
    }
}

fn limit_of(limits: &ControlLimits, kind: ChartKind) -> f64 {
    match kind {
        ChartKind::T2 => limits.t2_limit,
        ChartKind::Spe => limits.spe_limit,
    }
}

fn check_data(spec: &KernelSpec, healthy: &DMatrix<f64>, monitor: &DMatrix<f64>, cfg: &MonitorConfig) -> Result<()> {
    for (m, what) in [(healthy, "healthy data columns"), (monitor, "monitored data columns")] {
        if m.ncols() != spec.dim {
            return Err(Error::Dimension {
                expected: spec.dim,
                got: m.ncols(),
                context: what,
            });
        }
    }
    if let Some(&t) = cfg.timestamps.iter().find(|&&t| t >= monitor.nrows()) {
        return Err(Error::Input(format!(
            "contribution timestamp {t} outside the {} monitored samples",
            monitor.nrows()
        )));
    }
    Ok(())
}

fn chart_rows(spec: &KernelSpec, theta: &[f64], healthy: &[Vec<f64>], monitor: &[Vec<f64>], cfg: &MonitorConfig) -> Result<DeterministicChart> {
    let params = KernelParams::from_theta(spec, theta)?;
    let model = fit_kpca_rows(healthy.to_vec(), spec.build(&params)?, cfg.policy)?;
    let limits = control_limits(&model.monitor_rows(healthy)?, cfg.confidence)?;
    let stats = model.monitor_rows(monitor)?;
    let contributions = cfg
        .timestamps
        .iter()
        .map(|&t| {
            Ok(Contributions {
                timestamp: t,
                t2: model.t2_contributions(&monitor[t])?.0,
                spe: model.spe_contributions(&monitor[t])?.0,
            })
        })
        .collect::<Result<_>>()?;
    Ok(DeterministicChart {
        theta: theta.to_vec(),
        t2: stats.t2,
        spe: stats.spe,
        limits,
        n_components: model.n_components(),
        contributions,
    })
}

/// Fits the monitoring model at `theta` and charts the monitored samples.
pub fn deterministic_chart(
    spec: &KernelSpec,
    theta: &[f64],
    healthy: &DMatrix<f64>,
    monitor: &DMatrix<f64>,
    cfg: &MonitorConfig,
) -> Result<DeterministicChart> {
    check_data(spec, healthy, monitor, cfg)?;
    chart_rows(spec, theta, &rows(healthy), &rows(monitor), cfg)
}

/// Per-draw monitoring output for the draws that produced a model.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawStatistics {
    pub draws: Vec<DeterministicChart>,
    pub skipped: usize,
    pub supplied: usize,
}

impl DrawStatistics {
    pub fn retained(&self) -> usize {
        self.draws.len()
    }

    pub fn n_samples(&self) -> usize {
        self.draws.first().map_or(0, |d| d.t2.len())
    }
}

/// Charts every draw; draws whose model cannot be built are skipped.
pub fn propagate(
    spec: &KernelSpec,
    draws: &[Vec<f64>],
    healthy: &DMatrix<f64>,
    monitor: &DMatrix<f64>,
    cfg: &MonitorConfig,
) -> Result<DrawStatistics> {
    if draws.is_empty() {
        return Err(Error::Input("propagation needs at least one draw".into()));
    }
    check_data(spec, healthy, monitor, cfg)?;
    let (h, m) = (rows(healthy), rows(monitor));
    let results: Vec<Option<DeterministicChart>> = draws
        .par_iter()
        .map(|theta| chart_rows(spec, theta, &h, &m, cfg).ok())
        .collect();
    let supplied = draws.len();
    let kept: Vec<DeterministicChart> = results.into_iter().flatten().collect();
    let skipped = supplied - kept.len();
    if kept.is_empty() || skipped as f64 > MAX_SKIP_FRACTION * supplied as f64 {
        return Err(Error::TooManySkipped { skipped, total: supplied });
    }
    Ok(DrawStatistics {
        draws: kept,
        skipped,
        supplied,
    })
}

/// Order-free mean: values are sorted before summation.
fn sorted_mean(values: &[f64]) -> f64 {
    let s = stats::sorted(values);
    s.iter().sum::<f64>() / s.len() as f64
}

/// Mean, median and equal-tailed interval of a set of values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub mean: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Band {
    pub fn from_values(values: &[f64], alpha: f64) -> Self {
        let s = stats::sorted(values);
        Self {
            mean: s.iter().sum::<f64>() / s.len() as f64,
            median: stats::quantile_sorted(&s, 0.5),
            lower: stats::quantile_sorted(&s, alpha / 2.0),
            upper: stats::quantile_sorted(&s, 1.0 - alpha / 2.0),
        }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Input(format!("credible level {alpha} outside (0, 1)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilisticChart {
    pub kind: ChartKind,
    pub alpha: f64,
    /// One band per monitored sample.
    pub points: Vec<Band>,
    /// Band of the per-draw control limits.
    pub limit: Band,
}

impl ProbabilisticChart {
    /// Samples whose posterior-mean statistic exceeds the mean limit.
    pub fn alarms(&self) -> Vec<bool> {
        self.points.iter().map(|b| b.mean > self.limit.mean).collect()
    }

    pub fn means(&self) -> Vec<f64> {
        self.points.iter().map(|b| b.mean).collect()
    }
}

/// Pointwise posterior summary of one chart across draws.
pub fn summarize_chart(stats: &DrawStatistics, kind: ChartKind, alpha: f64) -> Result<ProbabilisticChart> {
    check_alpha(alpha)?;
    if stats.draws.is_empty() {
        return Err(Error::Input("no retained draws".into()));
    }
    let points = (0..stats.n_samples())
        .into_par_iter()
        .map(|i| {
            let v: Vec<f64> = stats.draws.iter().map(|d| d.series(kind)[i]).collect();
            Band::from_values(&v, alpha)
        })
        .collect();
    let limits: Vec<f64> = stats.draws.iter().map(|d| d.limit(kind)).collect();
    Ok(ProbabilisticChart {
        kind,
        alpha,
        points,
        limit: Band::from_values(&limits, alpha),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContributionBand {
    pub timestamp: usize,
    pub kind: ChartKind,
    pub alpha: f64,
    /// One band per variable.
    pub variables: Vec<Band>,
    /// Variable indices by decreasing `|mean|`.
    pub ranking: Vec<usize>,
}

/// Posterior summary of the contributions at a diagnosed sample.
pub fn summarize_contributions(stats: &DrawStatistics, timestamp: usize, kind: ChartKind, alpha: f64) -> Result<ContributionBand> {
    check_alpha(alpha)?;
    let per_draw: Vec<&Vec<f64>> = stats
        .draws
        .iter()
        .map(|d| {
            d.contributions
                .iter()
                .find(|c| c.timestamp == timestamp)
                .map(|c| match kind {
                    ChartKind::T2 => &c.t2,
                    ChartKind::Spe => &c.spe,
                })
                .ok_or_else(|| Error::Input(format!("no contributions were computed at sample {timestamp}")))
        })
        .collect::<Result<_>>()?;
    if per_draw.is_empty() {
        return Err(Error::Input("no retained draws".into()));
    }
    let p = per_draw[0].len();
    let variables: Vec<Band> = (0..p)
        .map(|d| Band::from_values(&per_draw.iter().map(|c| c[d]).collect::<Vec<_>>(), alpha))
        .collect();
    let mut ranking: Vec<usize> = (0..p).collect();
    ranking.sort_by(|&a, &b| variables[b].mean.abs().total_cmp(&variables[a].mean.abs()).then(a.cmp(&b)));
    Ok(ContributionBand {
        timestamp,
        kind,
        alpha,
        variables,
        ranking,
    })
}

/// Coordinate-wise mean of draws in log-parameter space.
pub fn posterior_mean_theta(draws: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = draws.first().ok_or_else(|| Error::Input("no draws".into()))?;
    Ok((0..first.len())
        .map(|j| sorted_mean(&draws.iter().map(|d| d[j]).collect::<Vec<_>>()))
        .collect())
}

/// Deterministic chart at the posterior-mean parameters.
pub fn posterior_mean_chart(
    spec: &KernelSpec,
    draws: &[Vec<f64>],
    healthy: &DMatrix<f64>,
    monitor: &DMatrix<f64>,
    cfg: &MonitorConfig,
) -> Result<DeterministicChart> {
    deterministic_chart(spec, &posterior_mean_theta(draws)?, healthy, monitor, cfg)
}

//! Workflow stages. Each stage reads its inputs from the run configuration and
//! the output directory and writes its results back there, so stages can be
//! rerun on their own. `run` chains them through the same files.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use kmspc_core::calibration::{calibrate, CalibrationObjective, OptimizerConfig};
use kmspc_core::kernels::{rows, KernelFamily, KernelParams, KernelSpec};
use kmspc_core::kpca::{control_limits, fit_kpca, ControlLimits};
use kmspc_core::mcmc::{
    diagnostics, ess, sample, AmConfig, DramConfig, HmcConfig, LogPosterior, NutsConfig, PriorSpec, SamplerConfig,
    SamplerKind, MIN_DIAGNOSTIC_LENGTH, MIN_ESS_LENGTH,
};
use kmspc_core::metrics::evaluate_charts;
use kmspc_core::propagation::{
    deterministic_chart, posterior_mean_chart, propagate as propagate_draws, summarize_chart, summarize_contributions,
    ChartKind, Contributions, DeterministicChart, DrawStatistics, MonitorConfig,
};
use kmspc_core::stats;
use kmspc_core::unsupervised::{
    assign_pseudo_labels, median_pairwise_distance, tune_unsupervised, TuningConfig, UNSUPERVISED_NOISE_SD,
    UNSUPERVISED_SIGNAL_SD,
};

use crate::config::{Route, RunConfig};
use crate::dataset::{load_dataset, Dataset, LoadOptions};
use crate::error::{CliError, Result};
use crate::io::{self, fmt_f64, parse_f64, ChartRow};
use crate::manifest::{self, Manifest};
use crate::plot;
use crate::scaler::{apply_scaler, fit_scaler};

pub const THETA_FILE: &str = "theta_hat.txt";
pub const TRACE_FILE: &str = "calibration_trace.csv";
pub const TUNING_FILE: &str = "tuning.csv";
pub const PSEUDO_LABEL_FILE: &str = "pseudo_labels.csv";
pub const CHAIN_FILE: &str = "chain.csv";
pub const DRAW_LIMITS_FILE: &str = "draws_limits.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESIDUAL_SD_KEY: &str = "residual_sd";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    TuneUnsupervised,
    Calibrate,
    Sample,
    Propagate,
    Chart,
    Evaluate,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Self::TuneUnsupervised => "tune-unsupervised",
            Self::Calibrate => "calibrate",
            Self::Sample => "sample",
            Self::Propagate => "propagate",
            Self::Chart => "chart",
            Self::Evaluate => "evaluate",
        }
    }

    /// Stages executed by `run` for a configuration.
    pub fn sequence(cfg: &RunConfig) -> Vec<Stage> {
        let mut s = Vec::new();
        if matches!(cfg.route, Route::Unsupervised(_)) {
            s.push(Self::TuneUnsupervised);
        }
        s.extend([Self::Calibrate, Self::Sample, Self::Propagate, Self::Chart, Self::Evaluate]);
        s
    }
}

pub fn draws_file(kind: ChartKind) -> String {
    format!("draws_{kind}.csv")
}

pub fn draws_contrib_file(kind: ChartKind) -> String {
    format!("draws_contrib_{kind}.csv")
}

/// Chart file of a variant: `prior` (at θ̂), `postmean`, or the probabilistic chart.
pub fn chart_file(variant: Option<&str>, kind: ChartKind) -> String {
    match variant {
        Some(v) => format!("chart_{v}_{kind}.csv"),
        None => format!("chart_{kind}.csv"),
    }
}

pub fn contrib_file(variant: Option<&str>, kind: ChartKind) -> String {
    match variant {
        Some(v) => format!("contrib_{v}_{kind}.csv"),
        None => format!("contrib_{kind}.csv"),
    }
}

fn svg_name(csv: &str) -> String {
    format!("{}.svg", csv.trim_end_matches(".csv"))
}

/// Autoscaled inputs. The scaler is fit on the healthy data only.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub healthy: Dataset,
    /// Monitored data; the healthy data when no monitored file is configured.
    pub monitor: Dataset,
    pub calibration: Option<Dataset>,
}

fn load_options(cfg: &RunConfig, require_labels: bool) -> LoadOptions {
    LoadOptions {
        delimiter: cfg.delimiter,
        label_column: cfg.label_column.clone(),
        time_column: cfg.time_column.clone(),
        require_labels,
    }
}

pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let healthy_path = cfg
        .healthy
        .as_ref()
        .ok_or_else(|| CliError::Config("missing 'healthy' dataset".into()))?;
    let raw = load_dataset(healthy_path, &load_options(cfg, false))?;
    let scaler = fit_scaler(&raw)?;
    let healthy = apply_scaler(&scaler, &raw)?;
    let monitor = match &cfg.monitor {
        Some(p) => apply_scaler(&scaler, &load_dataset(p, &load_options(cfg, false))?)?,
        None => healthy.clone(),
    };
    let calibration = match (&cfg.calibration, cfg.route) {
        (Some(p), Route::Gpc | Route::Kpcr) => Some(apply_scaler(&scaler, &load_dataset(p, &load_options(cfg, true))?)?),
        _ => None,
    };
    Ok(Inputs {
        healthy,
        monitor,
        calibration,
    })
}

pub fn kernel_spec(cfg: &RunConfig, p: usize) -> KernelSpec {
    match cfg.kernel {
        KernelFamily::Se => KernelSpec::se(p),
        KernelFamily::Ard => KernelSpec::ard(p),
    }
}

fn labels_f64(labels: &[bool]) -> Vec<f64> {
    labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

/// Likelihood of the configured route. `sigma` fixes the K-PCR residual sd.
fn objective(cfg: &RunConfig, inputs: &Inputs, spec: &KernelSpec, sigma: Option<f64>) -> Result<CalibrationObjective> {
    match cfg.route {
        Route::Gpc | Route::Kpcr => {
            let cal = inputs
                .calibration
                .as_ref()
                .ok_or_else(|| CliError::Config(format!("route '{}' needs a 'calibration' dataset", cfg.route)))?;
            let y = labels_f64(cal.labels.as_ref().expect("loaded with required labels"));
            Ok(if cfg.route == Route::Gpc {
                CalibrationObjective::gp_marginal(*spec, &cal.x, &y)?
            } else {
                CalibrationObjective::kpcr(*spec, &cal.x, &y, cfg.retain, sigma)?
            })
        }
        Route::Unsupervised(_) => {
            let labels = read_pseudo_labels(&cfg.out.join(PSEUDO_LABEL_FILE))?;
            if labels.len() != inputs.monitor.n() {
                return Err(CliError::Config(format!(
                    "{} pseudo-labels for {} monitored samples",
                    labels.len(),
                    inputs.monitor.n()
                )));
            }
            Ok(CalibrationObjective::gp_marginal(*spec, &inputs.monitor.x, &labels_f64(&labels))?)
        }
    }
}

fn ensure_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))
}

fn record_config(cfg: &RunConfig, m: &mut Manifest) {
    m.clear_prefix("config");
    for (k, v) in cfg.entries() {
        m.set_str(&format!("config.{k}"), v);
    }
    m.set_u64("seed", cfg.seed);
}

/// Runs one stage, recording timing and failure state in the manifest.
pub fn run_stage(stage: Stage, cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let start = Instant::now();
    let result = match stage {
        Stage::TuneUnsupervised => tune(cfg, m),
        Stage::Calibrate => calibrate_stage(cfg, m),
        Stage::Sample => sample_stage(cfg, m),
        Stage::Propagate => propagate_stage(cfg, m),
        Stage::Chart => chart_stage(cfg, m),
        Stage::Evaluate => evaluate_stage(cfg, m),
    };
    if cfg.record_timings {
        m.set_f64(&format!("timing.{}", stage.name()), start.elapsed().as_secs_f64());
    }
    result.map_err(|e| CliError::Stage {
        stage: stage.name(),
        source: Box::new(e),
    })
}

fn finish(cfg: &RunConfig, m: &mut Manifest, result: &Result<()>) -> Result<()> {
    m.remove("failed_stage");
    m.remove("error");
    match result {
        Ok(()) => m.set_str("status", "ok"),
        Err(e) => {
            m.set_str("status", "failed");
            if let CliError::Stage { stage, source } = e {
                m.set_str("failed_stage", *stage);
                m.set_str("error", source.to_string());
            } else {
                m.set_str("error", e.to_string());
            }
        }
    }
    m.write(&cfg.out.join(manifest::FILE_NAME))
}

/// Runs a single stage against an existing output directory.
pub fn run_single(stage: Stage, cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    ensure_out(cfg)?;
    let mut m = Manifest::load_or_new(&cfg.out.join(manifest::FILE_NAME))?;
    record_config(cfg, &mut m);
    let result = run_stage(stage, cfg, &mut m);
    finish(cfg, &mut m, &result)?;
    result
}

/// Full workflow: every stage in order, with a fresh manifest.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    ensure_out(cfg)?;
    let mut m = Manifest::new();
    record_config(cfg, &mut m);
    let mut result = Ok(());
    for stage in Stage::sequence(cfg) {
        result = run_stage(stage, cfg, &mut m);
        if result.is_err() {
            break;
        }
    }
    finish(cfg, &mut m, &result)?;
    result.map(|()| m)
}

// ---------------------------------------------------------------- tuning

fn tuning_config(cfg: &RunConfig) -> TuningConfig {
    TuningConfig {
        seed: cfg.seed,
        limit_confidence: cfg.confidence,
        ..Default::default()
    }
}

fn tune(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let Route::Unsupervised(method) = cfg.route else {
        return Err(CliError::Config(format!(
            "tune-unsupervised needs an unsupervised route, got '{}'",
            cfg.route
        )));
    };
    let inputs = load_inputs(cfg)?;
    let spec = kernel_spec(cfg, inputs.healthy.p());
    let result = tune_unsupervised(method, &inputs.healthy.x, &tuning_config(cfg))?;
    let model = fit_kpca(&inputs.healthy.x, spec.build(&result.params())?, cfg.retain)?;
    let limits = control_limits(&model.monitor(&inputs.healthy.x)?, cfg.confidence)?;
    let pseudo = assign_pseudo_labels(&model, &limits, &inputs.monitor.x)?;

    let header = vec!["lengthscale".to_string(), "criterion".to_string(), "selected".to_string()];
    let rows: Vec<Vec<String>> = if result.grid.is_empty() {
        vec![vec![fmt_f64(result.lengthscale), fmt_f64(f64::NAN), "1".into()]]
    } else {
        result
            .grid
            .iter()
            .zip(&result.criterion)
            .map(|(l, c)| vec![fmt_f64(*l), fmt_f64(*c), if *l == result.lengthscale { "1" } else { "0" }.into()])
            .collect()
    };
    io::write_csv(&cfg.out.join(TUNING_FILE), &header, rows)?;
    write_pseudo_labels(&cfg.out.join(PSEUDO_LABEL_FILE), &inputs.monitor, &pseudo.labels)?;

    m.clear_prefix("tuning");
    m.set_str("tuning.method", method.as_str());
    m.set_f64("tuning.lengthscale", result.lengthscale);
    m.set_f64("tuning.t2_limit", limits.t2_limit);
    m.set_f64("tuning.spe_limit", limits.spe_limit);
    m.set_f64("tuning.pseudo_positive_fraction", pseudo.fraction_positive());
    Ok(())
}

fn write_pseudo_labels(path: &Path, monitor: &Dataset, labels: &[bool]) -> Result<()> {
    io::write_csv(
        path,
        &["time".to_string(), "label".to_string()],
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| vec![fmt_f64(monitor.time_of(i)), if *l { "1" } else { "0" }.to_string()]),
    )
}

pub fn read_pseudo_labels(path: &Path) -> Result<Vec<bool>> {
    let (header, rows) = io::read_csv(path)?;
    if header != ["time", "label"] {
        return Err(CliError::format(path, "expected columns time,label"));
    }
    rows.iter()
        .map(|r| match r[1].as_str() {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(CliError::format(path, format!("label '{other}' is not 0 or 1"))),
        })
        .collect()
}

// ----------------------------------------------------------- calibration

/// Starting point: the median-distance lengthscale, unit signal sd, noise sd 0.1.
pub fn initial_theta(cfg: &RunConfig, inputs: &Inputs, spec: &KernelSpec) -> Result<Vec<f64>> {
    let ell = match cfg.route {
        Route::Unsupervised(_) => {
            let path = cfg.out.join(TUNING_FILE);
            let (_, rows) = io::read_csv(&path)?;
            let sel = rows
                .iter()
                .find(|r| r.get(2).map(String::as_str) == Some("1"))
                .ok_or_else(|| CliError::format(&path, "no selected lengthscale"))?;
            parse_f64(&path, &sel[0])?
        }
        _ => median_pairwise_distance(&rows(&inputs.healthy.x)),
    };
    if !(ell > 0.0) {
        return Err(CliError::Config("healthy data has zero median pairwise distance".into()));
    }
    let ls = vec![ell; spec.n_lengthscales()];
    Ok(KernelParams::from_natural(&ls, UNSUPERVISED_SIGNAL_SD, UNSUPERVISED_NOISE_SD).to_theta())
}

fn calibrate_stage(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let spec = kernel_spec(cfg, inputs.healthy.p());
    let obj = objective(cfg, &inputs, &spec, cfg.kpcr_sigma)?;
    let init = initial_theta(cfg, &inputs, &spec)?;
    let mut ocfg = OptimizerConfig::new(cfg.optimizer).with_seed(cfg.seed);
    if let Some(it) = cfg.max_iters {
        ocfg.max_iters = it;
    }
    let res = calibrate(&obj, &ocfg, &init)?;

    let names = spec.param_names();
    let mut extras = Vec::new();
    if let CalibrationObjective::KpcrDiscrimination(k) = &obj {
        let fit = k.fit(&res.theta_hat)?;
        extras.push((RESIDUAL_SD_KEY, fit.sigma));
        m.set_f64("calibration.residual_sd", fit.sigma);
        m.set_usize("calibration.kpcr_components", fit.n_components);
        m.set_bool("calibration.kpcr_pseudo_inverse", fit.used_pseudo_inverse);
    }
    io::write_theta(&cfg.out.join(THETA_FILE), &names, &res.theta_hat, &extras)?;
    io::write_csv(
        &cfg.out.join(TRACE_FILE),
        &["iteration".to_string(), "loss".to_string()],
        res.loss_trace
            .iter()
            .enumerate()
            .map(|(i, l)| vec![i.to_string(), fmt_f64(*l)]),
    )?;

    m.clear_prefix("theta_hat");
    m.set_f64s("theta_hat", &names, &res.theta_hat);
    m.set_str("calibration.optimizer", cfg.optimizer.as_str());
    m.set_f64("calibration.log_likelihood", res.log_likelihood);
    m.set_bool("calibration.converged", res.converged);
    m.set_usize("calibration.evaluations", res.evaluations);
    m.set_usize("calibration.iterations", res.loss_trace.len());
    if cfg.record_timings {
        m.set_f64("timing.optimizer_wall", res.wall_time);
    }
    Ok(())
}

/// θ̂ and the optional K-PCR residual sd.
pub fn read_theta_hat(cfg: &RunConfig, spec: &KernelSpec) -> Result<(Vec<f64>, Option<f64>)> {
    let path = cfg.out.join(THETA_FILE);
    let entries = io::read_theta(&path)?;
    let names = spec.param_names();
    let mut theta = Vec::with_capacity(names.len());
    let mut sigma = None;
    for (n, v) in entries {
        if n == RESIDUAL_SD_KEY {
            sigma = Some(v);
        } else {
            theta.push((n, v));
        }
    }
    let got: Vec<&String> = theta.iter().map(|(n, _)| n).collect();
    if got != names.iter().collect::<Vec<_>>() {
        return Err(CliError::format(&path, format!("parameters {got:?} do not match the kernel's {names:?}")));
    }
    Ok((theta.into_iter().map(|(_, v)| v).collect(), sigma))
}

// --------------------------------------------------------------- sampling

pub fn sampler_config(cfg: &RunConfig) -> SamplerConfig {
    let n_draws = cfg.n_draws();
    let burn_in = cfg.burn_in_count();
    let am = AmConfig {
        n_draws,
        burn_in,
        init_cov_scale: cfg.init_cov_scale,
        adapt_start: cfg.adapt_start,
        epsilon_reg: cfg.epsilon_reg,
        seed: cfg.seed,
    };
    match cfg.sampler {
        SamplerKind::Am => SamplerConfig::Am(am),
        SamplerKind::Dram => SamplerConfig::Dram(DramConfig {
            am,
            stage2_scale: cfg.stage2_scale,
        }),
        SamplerKind::Hmc => {
            let d = HmcConfig::default();
            SamplerConfig::Hmc(HmcConfig {
                n_draws,
                burn_in,
                step_size: cfg.step_size.unwrap_or(d.step_size),
                n_leapfrog: cfg.n_leapfrog.unwrap_or(d.n_leapfrog),
                seed: cfg.seed,
                ..d
            })
        }
        SamplerKind::Nuts => {
            let d = NutsConfig::default();
            SamplerConfig::Nuts(NutsConfig {
                n_draws,
                burn_in,
                step_size: cfg.step_size.unwrap_or(d.step_size),
                max_tree_depth: cfg.max_tree_depth.unwrap_or(d.max_tree_depth),
                seed: cfg.seed,
                ..d
            })
        }
    }
}

fn sample_stage(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let spec = kernel_spec(cfg, inputs.healthy.p());
    let (theta_hat, sigma) = read_theta_hat(cfg, &spec)?;
    let sigma = cfg.kpcr_sigma.or(sigma);
    let obj = objective(cfg, &inputs, &spec, sigma)?;
    if cfg.route == Route::Kpcr && sigma.is_none() {
        return Err(CliError::Config(format!(
            "K-PCR sampling needs '{RESIDUAL_SD_KEY}' in {THETA_FILE} or kpcr_sigma"
        )));
    }
    let prior = PriorSpec::new(theta_hat.clone(), cfg.prior_sds(spec.n_params())?)?;
    let post = LogPosterior::new(prior, obj)?;
    let chain = sample(&post, &theta_hat, &sampler_config(cfg))?;

    let names = spec.param_names();
    let mut header = vec!["draw".to_string()];
    header.extend(names.iter().cloned());
    header.push("log_post".into());
    io::write_csv(
        &cfg.out.join(CHAIN_FILE),
        &header,
        chain.draws.iter().zip(&chain.log_post).enumerate().map(|(i, (d, lp))| {
            let mut r = vec![i.to_string()];
            r.extend(d.iter().map(|v| fmt_f64(*v)));
            r.push(fmt_f64(*lp));
            r
        }),
    )?;

    m.clear_prefix("sampler");
    m.clear_prefix("posterior");
    m.set_str("sampler.kind", chain.sampler.as_str());
    m.set_usize("sampler.draws", chain.len());
    m.set_usize("sampler.burn_in", chain.burn_in);
    m.set_f64("sampler.acceptance_rate", chain.acceptance_rate);
    m.set_usize("sampler.stage2_accepts", chain.stats.stage2_accepts);
    m.set_usize("sampler.divergences", chain.stats.divergences);
    if let Some(s) = chain.stats.final_step_size {
        m.set_f64("sampler.final_step_size", s);
    }
    if let Some(d) = chain.stats.mean_tree_depth {
        m.set_f64("sampler.mean_tree_depth", d);
    }
    let kept = chain.retained();
    for (j, n) in names.iter().enumerate() {
        let x: Vec<f64> = kept.iter().map(|d| d[j]).collect();
        m.set_f64(&format!("posterior.mean.{n}"), stats::mean(&x));
        if x.len() > 1 {
            m.set_f64(&format!("posterior.sd.{n}"), stats::std_dev(&x));
        }
    }
    if kept.len() >= MIN_ESS_LENGTH {
        let e = ess(&chain, chain.burn_in)?;
        m.set_f64s("posterior.ess", &names, &e.ess);
    }
    if kept.len() >= MIN_DIAGNOSTIC_LENGTH {
        m.set_bool("posterior.nonstationary", diagnostics(&chain)?.nonstationary);
    }
    Ok(())
}

pub fn read_chain(path: &Path, names: &[String]) -> Result<Vec<Vec<f64>>> {
    let (header, rows) = io::read_csv(path)?;
    let expect: Vec<String> = std::iter::once("draw".to_string())
        .chain(names.iter().cloned())
        .chain(std::iter::once("log_post".to_string()))
        .collect();
    if header != expect {
        return Err(CliError::format(path, format!("expected columns {expect:?}")));
    }
    rows.iter()
        .map(|r| r[1..=names.len()].iter().map(|s| parse_f64(path, s)).collect())
        .collect()
}

// ------------------------------------------------------------ propagation

fn contribution_timestamps(cfg: &RunConfig, first_alarm: Option<usize>, n: usize) -> Result<Vec<usize>> {
    let primary = first_alarm.map_or(n - 1, |t| (t + cfg.contrib_offset).min(n - 1));
    let mut ts = vec![primary];
    let mut seen = BTreeSet::from([primary]);
    for &t in &cfg.contrib_times {
        if t >= n {
            return Err(CliError::Config(format!("contribution time {t} outside the {n} monitored samples")));
        }
        if seen.insert(t) {
            ts.push(t);
        }
    }
    Ok(ts)
}

fn monitor_times(monitor: &Dataset) -> Vec<f64> {
    (0..monitor.n()).map(|i| monitor.time_of(i)).collect()
}

fn write_deterministic(cfg: &RunConfig, variant: &str, chart: &DeterministicChart, inputs: &Inputs) -> Result<()> {
    let times = monitor_times(&inputs.monitor);
    for kind in ChartKind::BOTH {
        io::write_chart(
            &cfg.out.join(chart_file(Some(variant), kind)),
            &io::chart_rows_deterministic(chart, kind, &times),
        )?;
        let c = &chart.contributions[0];
        let values = match kind {
            ChartKind::T2 => &c.t2,
            ChartKind::Spe => &c.spe,
        };
        io::write_contrib(
            &cfg.out.join(contrib_file(Some(variant), kind)),
            &io::contrib_rows_values(values, &inputs.monitor.names),
        )?;
    }
    Ok(())
}

fn propagate_stage(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let spec = kernel_spec(cfg, inputs.healthy.p());
    let (theta_hat, _) = read_theta_hat(cfg, &spec)?;
    let names = spec.param_names();
    let chain = read_chain(&cfg.out.join(CHAIN_FILE), &names)?;
    let burn = cfg.burn_in_count();
    if burn >= chain.len() {
        return Err(CliError::Config(format!(
            "burn-in {burn} leaves no draws of the {} in {CHAIN_FILE}",
            chain.len()
        )));
    }
    let kept = &chain[burn..];
    let (h, mon) = (&inputs.healthy.x, &inputs.monitor.x);

    let mut mcfg = MonitorConfig {
        policy: cfg.retain,
        confidence: cfg.confidence,
        timestamps: Vec::new(),
    };
    let probe = deterministic_chart(&spec, &theta_hat, h, mon, &mcfg)?;
    mcfg.timestamps = contribution_timestamps(cfg, probe.first_alarm(), inputs.monitor.n())?;

    let prior = deterministic_chart(&spec, &theta_hat, h, mon, &mcfg)?;
    let post_mean = posterior_mean_chart(&spec, kept, h, mon, &mcfg)?;
    write_deterministic(cfg, "prior", &prior, &inputs)?;
    write_deterministic(cfg, "postmean", &post_mean, &inputs)?;

    let stats = propagate_draws(&spec, kept, h, mon, &mcfg)?;
    write_draws(cfg, &stats, &inputs)?;

    m.clear_prefix("propagation");
    m.set_usize("propagation.supplied", stats.supplied);
    m.set_usize("propagation.skipped", stats.skipped);
    m.set_usize("propagation.retained", stats.retained());
    m.set_str(
        "propagation.contrib_times",
        mcfg.timestamps.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
    );
    m.set_usize("propagation.prior_components", prior.n_components);
    m.set_usize("propagation.postmean_components", post_mean.n_components);
    m.set_f64s("propagation.postmean_theta", &names, &post_mean.theta);
    match prior.first_alarm() {
        Some(t) => m.set_usize("propagation.prior_first_alarm", t),
        None => m.set_str("propagation.prior_first_alarm", "none"),
    }
    Ok(())
}

fn draw_header(first: &str, extra: Option<&str>, n: usize) -> Vec<String> {
    let mut h = vec![first.to_string()];
    h.extend(extra.map(str::to_string));
    h.extend((0..n).map(|d| format!("d{d}")));
    h
}

fn write_draws(cfg: &RunConfig, stats: &DrawStatistics, inputs: &Inputs) -> Result<()> {
    let m = stats.retained();
    let times = monitor_times(&inputs.monitor);
    for kind in ChartKind::BOTH {
        io::write_csv(
            &cfg.out.join(draws_file(kind)),
            &draw_header("time", None, m),
            times.iter().enumerate().map(|(i, t)| {
                std::iter::once(fmt_f64(*t))
                    .chain(stats.draws.iter().map(|d| fmt_f64(d.series(kind)[i])))
                    .collect()
            }),
        )?;
        let mut rows = Vec::new();
        let n_ts = stats.draws[0].contributions.len();
        for c in 0..n_ts {
            let ts = stats.draws[0].contributions[c].timestamp;
            for (v, name) in inputs.monitor.names.iter().enumerate() {
                let mut r = vec![ts.to_string(), name.clone()];
                r.extend(stats.draws.iter().map(|d| {
                    let cc = &d.contributions[c];
                    fmt_f64(match kind {
                        ChartKind::T2 => cc.t2[v],
                        ChartKind::Spe => cc.spe[v],
                    })
                }));
                rows.push(r);
            }
        }
        io::write_csv(
            &cfg.out.join(draws_contrib_file(kind)),
            &draw_header("timestamp", Some("variable"), m),
            rows,
        )?;
    }
    io::write_csv(
        &cfg.out.join(DRAW_LIMITS_FILE),
        &["draw", "t2_limit", "spe_limit", "n_components"].map(String::from),
        stats.draws.iter().enumerate().map(|(i, d)| {
            vec![
                i.to_string(),
                fmt_f64(d.limits.t2_limit),
                fmt_f64(d.limits.spe_limit),
                d.n_components.to_string(),
            ]
        }),
    )
}

/// Rebuilds per-draw statistics from the propagation files.
pub fn read_draws(cfg: &RunConfig) -> Result<(DrawStatistics, Vec<f64>, Vec<String>)> {
    let lpath = cfg.out.join(DRAW_LIMITS_FILE);
    let (_, lrows) = io::read_csv(&lpath)?;
    let m = lrows.len();
    if m == 0 {
        return Err(CliError::format(&lpath, "no draws"));
    }
    let mut draws: Vec<DeterministicChart> = lrows
        .iter()
        .map(|r| {
            Ok(DeterministicChart {
                theta: Vec::new(),
                t2: Vec::new(),
                spe: Vec::new(),
                limits: ControlLimits {
                    t2_limit: parse_f64(&lpath, &r[1])?,
                    spe_limit: parse_f64(&lpath, &r[2])?,
                    confidence: cfg.confidence,
                },
                n_components: r[3]
                    .parse()
                    .map_err(|_| CliError::format(&lpath, format!("bad component count '{}'", r[3])))?,
                contributions: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;

    let mut times = Vec::new();
    for kind in ChartKind::BOTH {
        let path = cfg.out.join(draws_file(kind));
        let (header, rows) = io::read_csv(&path)?;
        if header.len() != m + 1 {
            return Err(CliError::format(&path, format!("expected {m} draw columns")));
        }
        times = rows.iter().map(|r| parse_f64(&path, &r[0])).collect::<Result<_>>()?;
        for (d, chart) in draws.iter_mut().enumerate() {
            let series: Vec<f64> = rows.iter().map(|r| parse_f64(&path, &r[d + 1])).collect::<Result<_>>()?;
            match kind {
                ChartKind::T2 => chart.t2 = series,
                ChartKind::Spe => chart.spe = series,
            }
        }
    }

    let mut variables: Vec<String> = Vec::new();
    for kind in ChartKind::BOTH {
        let path = cfg.out.join(draws_contrib_file(kind));
        let (header, rows) = io::read_csv(&path)?;
        if header.len() != m + 2 {
            return Err(CliError::format(&path, format!("expected {m} draw columns")));
        }
        for r in &rows {
            let ts: usize = r[0]
                .parse()
                .map_err(|_| CliError::format(&path, format!("bad timestamp '{}'", r[0])))?;
            if kind == ChartKind::T2 && !variables.contains(&r[1]) {
                variables.push(r[1].clone());
            }
            for (d, chart) in draws.iter_mut().enumerate() {
                let v = parse_f64(&path, &r[d + 2])?;
                let pos = match chart.contributions.iter().position(|c| c.timestamp == ts) {
                    Some(p) => p,
                    None => {
                        chart.contributions.push(Contributions {
                            timestamp: ts,
                            t2: Vec::new(),
                            spe: Vec::new(),
                        });
                        chart.contributions.len() - 1
                    }
                };
                let c = &mut chart.contributions[pos];
                match kind {
                    ChartKind::T2 => c.t2.push(v),
                    ChartKind::Spe => c.spe.push(v),
                }
            }
        }
    }
    Ok((
        DrawStatistics {
            draws,
            skipped: 0,
            supplied: m,
        },
        times,
        variables,
    ))
}

// ------------------------------------------------------------------ charts

fn chart_stage(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let (stats, times, variables) = read_draws(cfg)?;
    let mut written: Vec<String> = Vec::new();
    for kind in ChartKind::BOTH {
        let chart = summarize_chart(&stats, kind, cfg.credible)?;
        let name = chart_file(None, kind);
        io::write_chart(&cfg.out.join(&name), &io::chart_rows_probabilistic(&chart, &times))?;
        written.push(name);
        let timestamps: Vec<usize> = stats.draws[0].contributions.iter().map(|c| c.timestamp).collect();
        for (i, ts) in timestamps.iter().enumerate() {
            let band = summarize_contributions(&stats, *ts, kind, cfg.credible)?;
            let name = if i == 0 {
                contrib_file(None, kind)
            } else {
                format!("contrib_{kind}_{ts}.csv")
            };
            io::write_contrib(&cfg.out.join(&name), &io::contrib_rows_band(&band, &variables))?;
            if i == 0 {
                m.set_str(
                    &format!("chart.{kind}.contrib_ranking"),
                    band.ranking
                        .iter()
                        .map(|&v| variables[v].clone())
                        .collect::<Vec<_>>()
                        .join(","),
                );
            }
        }
        m.set_f64(&format!("chart.{kind}.limit_mean"), chart.limit.mean);
        m.set_f64(&format!("chart.{kind}.limit_lower"), chart.limit.lower);
        m.set_f64(&format!("chart.{kind}.limit_upper"), chart.limit.upper);
    }
    for variant in ["prior", "postmean"] {
        for kind in ChartKind::BOTH {
            written.push(chart_file(Some(variant), kind));
        }
    }
    for name in &written {
        plot::plot_chart_file(&cfg.out.join(name), &cfg.out.join(svg_name(name)))?;
    }
    let mut contribs: Vec<String> = std::fs::read_dir(&cfg.out)
        .map_err(|e| CliError::io(&cfg.out, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("contrib_") && n.ends_with(".csv"))
        .collect();
    contribs.sort();
    for name in &contribs {
        plot::plot_contrib_file(&cfg.out.join(name), &cfg.out.join(svg_name(name)))?;
    }
    m.set_usize("chart.draws", stats.retained());
    Ok(())
}

// ------------------------------------------------------------- evaluation

/// Chart variants scored by `evaluate`, with their file variant tag.
pub const EVALUATED: [(&str, Option<&str>); 3] = [
    ("prior", Some("prior")),
    ("posterior_mean", Some("postmean")),
    ("probabilistic", None),
];

fn mean_width(rows: &[ChartRow], labels: &[bool], faulty: bool) -> f64 {
    let w: Vec<f64> = rows
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l == faulty)
        .map(|(r, _)| r.value.upper - r.value.lower)
        .collect();
    stats::mean(&w)
}

fn evaluate_stage(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    m.clear_prefix("metrics");
    let Some(labels) = inputs.monitor.labels.clone() else {
        m.set_str("metrics.status", "skipped: monitored data has no labels");
        return Ok(());
    };
    let mut header = vec!["chart".to_string()];
    let mut rows = Vec::new();
    for (tag, variant) in EVALUATED {
        let t2 = io::read_chart(&cfg.out.join(chart_file(variant, ChartKind::T2)))?;
        let spe = io::read_chart(&cfg.out.join(chart_file(variant, ChartKind::Spe)))?;
        if t2.len() != labels.len() || spe.len() != labels.len() {
            return Err(CliError::Config(format!(
                "chart length {} does not match {} labels",
                t2.len(),
                labels.len()
            )));
        }
        let mean = |r: &[ChartRow]| r.iter().map(|x| x.value.mean).collect::<Vec<_>>();
        let report = evaluate_charts(
            &mean(&t2),
            t2[0].limit.mean,
            &mean(&spe),
            spe[0].limit.mean,
            &labels,
            cfg.auc_source,
        )?;
        if header.len() == 1 {
            header.extend(report.entries().iter().map(|(k, _)| k.to_string()));
        }
        let mut r = vec![tag.to_string()];
        for (k, v) in report.entries() {
            r.push(fmt_f64(v));
            m.set_f64(&format!("metrics.{tag}.{k}"), v);
        }
        rows.push(r);
        if variant.is_none() && labels.iter().any(|l| *l) && labels.iter().any(|l| !*l) {
            for (kind, chart) in [(ChartKind::T2, &t2), (ChartKind::Spe, &spe)] {
                m.set_f64(&format!("metrics.band_width.{kind}.healthy"), mean_width(chart, &labels, false));
                m.set_f64(&format!("metrics.band_width.{kind}.faulty"), mean_width(chart, &labels, true));
            }
        }
    }
    io::write_csv(&cfg.out.join(METRICS_FILE), &header, rows)?;
    m.set_str("metrics.status", "ok");
    Ok(())
}

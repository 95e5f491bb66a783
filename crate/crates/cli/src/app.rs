//! Command-line surface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::pipeline::{run_pipeline, run_single, Stage};
use crate::plot;

#[derive(Debug, Parser)]
#[command(name = "kmspc", version, about = "Probabilistic kernel PCA control charts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate θ̂ and write theta_hat.txt.
    Calibrate(Common),
    /// Tune the lengthscale without labels and write pseudo-labels.
    TuneUnsupervised(Common),
    /// Sample the posterior around θ̂ and write chain.csv.
    Sample(Common),
    /// Chart every retained draw and the θ̂ / posterior-mean models.
    Propagate(Common),
    /// Summarize draws into probabilistic charts, contributions and plots.
    Chart(Common),
    /// Score the charts against the monitored labels.
    Evaluate(Common),
    /// Full workflow.
    Run(Common),
    /// Render a chart or contribution file as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// se | ard
    #[arg(long)]
    pub kernel: Option<String>,
    /// gpc | kpcr | unsupervised:<M1..M10>
    #[arg(long)]
    pub route: Option<String>,
    /// am | dram | hmc | nuts
    #[arg(long)]
    pub sampler: Option<String>,
    #[arg(long)]
    pub draws: Option<usize>,
    /// Fraction of the chain discarded.
    #[arg(long = "burn-in")]
    pub burn_in: Option<f64>,
    #[arg(long)]
    pub confidence: Option<f64>,
    /// Credible level α of the equal-tailed bands.
    #[arg(long)]
    pub credible: Option<f64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Any configuration key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Chart file (`time,mean,...` schema).
    #[arg(long, conflicts_with = "contrib", required_unless_present = "contrib")]
    pub chart: Option<PathBuf>,
    /// Contribution file (`variable,mean,lower,upper` schema).
    #[arg(long)]
    pub contrib: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

impl Common {
    /// Config file values, then flags, then `--set` pairs.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let here = Path::new("");
        let flags: [(&str, Option<String>); 10] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("kernel", self.kernel.clone()),
            ("route", self.route.clone()),
            ("sampler", self.sampler.clone()),
            ("draws", self.draws.map(|v| v.to_string())),
            ("burn_in", self.burn_in.map(|v| v.to_string())),
            ("confidence", self.confidence.map(|v| v.to_string())),
            ("credible", self.credible.map(|v| v.to_string())),
            ("workers", self.workers.map(|v| v.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v, here)?;
            }
        }
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got '{pair}'")))?;
            cfg.set(k, v, here)?;
        }
        Ok(cfg)
    }
}

fn init_workers(cfg: &RunConfig) {
    if cfg.workers > 0 {
        // A pool can only be installed once per process; later calls keep the first.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let (stage, common) = match &cli.command {
        Command::Plot(a) => {
            return match (&a.chart, &a.contrib) {
                (Some(c), _) => plot::plot_chart_file(c, &a.out),
                (None, Some(c)) => plot::plot_contrib_file(c, &a.out),
                (None, None) => Err(CliError::Config("plot needs --chart or --contrib".into())),
            };
        }
        Command::Run(c) => (None, c),
        Command::Calibrate(c) => (Some(Stage::Calibrate), c),
        Command::TuneUnsupervised(c) => (Some(Stage::TuneUnsupervised), c),
        Command::Sample(c) => (Some(Stage::Sample), c),
        Command::Propagate(c) => (Some(Stage::Propagate), c),
        Command::Chart(c) => (Some(Stage::Chart), c),
        Command::Evaluate(c) => (Some(Stage::Evaluate), c),
    };
    let cfg = common.resolve()?;
    init_workers(&cfg);
    match stage {
        Some(s) => run_single(s, &cfg),
        None => run_pipeline(&cfg).map(|_| ()),
    }
}

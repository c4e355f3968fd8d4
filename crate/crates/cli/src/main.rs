mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use ubr_core::phantom::AnomalyClass;
use ubr_core::UbrError;

/// Unsupervised body-part regression on slice stacks.
#[derive(Debug, Parser)]
#[command(name = "ubr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a phantom dataset directory.
    GenData(GenDataArgs),
    /// Train a network on a dataset.
    Train(TrainArgs),
    /// Write per-slice scores for every volume.
    Score(ScoreArgs),
    /// Fit the two class thresholds on labelled volumes.
    Calibrate(CalibrateArgs),
    /// Assign every slice to a class band.
    Classify(ClassifyArgs),
    /// Flag volumes whose score curve is not linear enough.
    DetectAnomaly(DetectArgs),
    /// Check analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Ordering metrics against held-out latent coordinates.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    volumes: Option<usize>,
    #[arg(long)]
    anomaly_fraction: Option<f64>,
    /// Comma-separated anomaly kinds to draw from.
    #[arg(long, value_delimiter = ',')]
    anomaly_kinds: Option<Vec<AnomalyClass>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Square slice size in pixels.
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    min_slices: Option<usize>,
    #[arg(long)]
    max_slices: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from this checkpoint up to the configured iteration count.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    max_interval: Option<usize>,
    #[arg(long)]
    dist_weight: Option<f64>,
    #[arg(long)]
    checkpoint_period: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated ids of the labelled volumes.
    #[arg(long, value_delimiter = ',', required = true)]
    volumes: Vec<String>,
    /// Labels CSV (`volume_id,slice_index,class`); defaults to the dataset's.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    thresholds: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Labels CSV used to report accuracy.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct DetectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = ubr_core::evaluate::DEFAULT_THRESHOLD_R)]
    r_threshold: f64,
    #[arg(long)]
    out: PathBuf,
    /// Exit with status 2 when any volume is flagged.
    #[arg(long)]
    fail_on_flag: bool,
}

#[derive(Debug, Args, Serialize)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Number of random seeds.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct MetricsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Latent sidecar; defaults to the dataset's.
    #[arg(long)]
    sidecar: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write a per-band score histogram.
    #[arg(long)]
    histogram: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    bin_width: f64,
}

pub(crate) const EXIT_USAGE: u8 = 1;
pub(crate) const EXIT_DATA: u8 = 2;
pub(crate) const EXIT_DIVERGENCE: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Score(a) => commands::score(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Classify(a) => commands::classify(a),
        Command::DetectAnomaly(a) => commands::detect_anomaly(a),
        Command::GradCheck(a) => commands::grad_check(a),
        Command::Metrics(a) => commands::metrics(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<UbrError>() {
                Some(UbrError::Divergence { .. }) => ExitCode::from(EXIT_DIVERGENCE),
                _ => ExitCode::from(EXIT_DATA),
            }
        }
    }
}

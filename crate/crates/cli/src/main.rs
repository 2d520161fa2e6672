mod commands;
mod knobs;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dlab_core::distill::Method;

use knobs::RunKnobs;

/// Knowledge-distillation laboratory.
#[derive(Debug, Parser)]
#[command(name = "dlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic train/valid pair
    Gen(GenArgs),
    /// Train a model on hard labels (CE or label smoothing), e.g. a teacher
    Train(TrainArgs),
    /// Train a student against a teacher checkpoint
    Distill(TrainArgs),
    /// Store a teacher's predictions on a dataset
    Precompute(PrecomputeArgs),
    /// Grid of benchmark runs over one axis, several seeds each
    Sweep(SweepArgs),
    /// Gradient re-weighting, geometry and heatmap diagnostics
    Diagnose(DiagnoseArgs),
    /// Collect run directories into one summary directory
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 100)]
    pub d: usize,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, default_value_t = 5)]
    pub c: usize,
    #[arg(long, default_value_t = 0.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 10)]
    pub m: usize,
    #[arg(long, default_value_t = 50_000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 10_000)]
    pub n_valid: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// File stem inside the output directory
    #[arg(long, default_value = "synth")]
    pub name: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: PathBuf,
    /// Teacher checkpoint (needed by every distillation method)
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Precomputed teacher cache for the training split
    #[arg(long)]
    pub teacher_cache: Option<PathBuf>,
    /// JSON file with any of the run settings; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub knobs: RunKnobs,
}

#[derive(Debug, Args)]
pub struct PrecomputeArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    /// Dataset file (usually the training split)
    #[arg(long)]
    pub data: PathBuf,
    /// full, pt or topk
    #[arg(long, default_value = "full")]
    pub kind: String,
    #[arg(long, default_value_t = 2)]
    pub topk: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// tau, k, lambda or t
    #[arg(long, default_value = "tau")]
    pub axis: String,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4")]
    pub values: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "ce,ls,kd,kd-pt,kd-sim")]
    pub methods: Vec<Method>,
    /// Data tau for axes other than tau
    #[arg(long, default_value_t = 0.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 4)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub base_seed: u64,
    /// Benchmark runs in flight at once
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Cache of finished runs, reused across sweeps
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Ignore cached runs and retrain
    #[arg(long)]
    pub refresh: bool,
    #[command(flatten)]
    pub bench: BenchKnobs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BenchKnobs {
    #[arg(long, default_value_t = 100)]
    pub d: usize,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, default_value_t = 5)]
    pub c: usize,
    #[arg(long, default_value_t = 10)]
    pub m: usize,
    #[arg(long, default_value_t = 50_000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 10_000)]
    pub n_valid: usize,
    #[arg(long, default_value_t = 128)]
    pub teacher_hidden: usize,
    #[arg(long, default_value_t = 64)]
    pub student_hidden: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 200_000)]
    pub steps: u64,
    #[arg(long, default_value_t = 1000)]
    pub eval_every: u64,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub student: Option<PathBuf>,
    /// Dataset the diagnostics are computed on
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    pub lambda: f64,
    /// Student-side temperature; defaults to the tuned KD value for the data's tau
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub raw_scale: bool,
    /// Examples used for per-example records
    #[arg(long, default_value_t = 10_000)]
    pub limit: usize,
    #[arg(long, default_value_t = 5.0)]
    pub heatmap_temperature: f64,
    /// Also emit the heatmap of the teacher truncated to its top-k entries
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories (each holding a manifest)
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Seed override from the environment, applied after flags and config files.
pub fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var("DLAB_SEED") {
        Ok(s) => Ok(Some(
            s.trim()
                .parse()
                .map_err(|e| anyhow::anyhow!("DLAB_SEED={s:?} is not an unsigned integer: {e}"))?,
        )),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(anyhow::anyhow!("DLAB_SEED: {e}")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a, false),
        Command::Distill(a) => commands::train(a, true),
        Command::Precompute(a) => commands::precompute(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(commands::Status::Clean) => ExitCode::SUCCESS,
        Ok(commands::Status::Flagged(msg)) => {
            eprintln!("dlab: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("dlab: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

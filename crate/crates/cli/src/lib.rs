//! Command-line driver: data generation, training, evaluation and analysis.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] ivtlr::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(ivtlr::Error::Numeric(_) | ivtlr::Error::Divergence { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "ivtlr", version, about = "Interleaved vision-text latent reasoning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a Grid-Sum dataset split into train.jsonl and test.jsonl.
    GenData(GenDataArgs),
    /// Run the staged curriculum and write one checkpoint per stage.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a one-row metrics CSV.
    Eval(EvalArgs),
    /// Attention diagnostics, ablations and sweeps.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub hops: Option<usize>,
    #[arg(long)]
    pub short_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding train.jsonl.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// One of full, no_latent_text, no_latent_vision, no_latent_part, no_cot, explicit_cot.
    #[arg(long, default_value = "full")]
    pub variant: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_stages: Option<usize>,
    #[arg(long)]
    pub epochs_per_stage: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A JSONL dataset file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub n_latent: usize,
    #[arg(long)]
    pub report: PathBuf,
    /// Write one JSON line per sample to this path.
    #[arg(long)]
    pub dump_per_sample: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value = "full")]
    pub variant: String,
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// attention, ablation, sweep-k or sweep-stage.
    #[arg(long)]
    pub mode: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint for attention mode.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Directory of stage checkpoints for sweep-stage mode.
    #[arg(long)]
    pub ckpt_dir: Option<PathBuf>,
    /// JSONL file for attention and sweep-stage; dataset directory for ablation and sweep-k.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_latent: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    pub k_values: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Analyze(a) => commands::analyze(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

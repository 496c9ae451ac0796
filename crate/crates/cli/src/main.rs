mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hsta::HstaError;

#[derive(Debug, Parser)]
#[command(
    name = "hsta",
    version,
    about = "Micro-expression recognition with hierarchical space-time attention"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML). Missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Experiment seed; for `gen`, the generator seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Folds trained concurrently.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    pub jobs: usize,
    /// Override one config key, e.g. `--set model.d=32`. Repeatable; applied after --seed.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (default output: ./data).
    Gen,
    /// Train one model on a whole dataset (default output: ./runs/train).
    Train(TrainArgs),
    /// Cross-validated training and evaluation (default output: ./runs/crossval).
    Crossval(CrossvalArgs),
    /// Finite-difference check of every backward rule.
    Gradcheck(GradcheckArgs),
    /// Summarize finished cross-validation runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Also save a checkpoint every N epochs.
    #[arg(long, value_name = "N")]
    pub checkpoint_every: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProtocolArg {
    Loso,
    Kfold,
}

#[derive(Debug, Args)]
pub struct CrossvalArgs {
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub protocol: Option<ProtocolArg>,
    /// Fold count for kfold.
    #[arg(long, value_name = "N")]
    pub k: Option<usize>,
    /// Run once per value, e.g. `model.video_depth=0,1,2`.
    #[arg(long, value_name = "KEY=V1,V2,...")]
    pub sweep: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Corrupt the backward rule of one op, e.g. `softmax`.
    #[arg(long, value_name = "OP")]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories, or parents of several (e.g. a sweep).
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Print each run's per-fold table too.
    #[arg(long)]
    pub per_fold: bool,
    /// Comma-separated output.
    #[arg(long)]
    pub csv: bool,
}

/// A command failure and the exit status it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration or arguments, or a failed check.
    Invalid(String),
    /// Missing or unreadable files and other environment problems.
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Invalid(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<HstaError> for Failure {
    fn from(e: HstaError) -> Self {
        match e {
            HstaError::Config(_) | HstaError::Contract(_) | HstaError::Dimension { .. } => {
                Failure::Invalid(e.to_string())
            }
            HstaError::Format { .. } | HstaError::Io { .. } => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Gen => commands::gen(&cli.common),
        Command::Train(args) => commands::train(&cli.common, args),
        Command::Crossval(args) => commands::crossval(&cli.common, args),
        Command::Gradcheck(args) => commands::gradcheck(&cli.common, args),
        Command::Report(args) => commands::report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

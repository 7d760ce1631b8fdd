mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tagcc::train::AblationMode;

/// Exit codes: 0 success, 2 configuration or validation error, 3 numerical failure.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn validation(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 2,
            error: error.into(),
        }
    }

    pub fn numerical(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 3,
            error: error.into(),
        }
    }

    pub fn other(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 1,
            error: error.into(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "tagcc", version, about = "Semantic-anchor clustering for tabular data")]
pub struct Cli {
    /// TOML file with training options.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// CSV file whose columns follow the schema.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON schema document.
    #[arg(long)]
    pub schema: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write one textual anchor per row.
    Anchor {
        #[command(flatten)]
        data: DataArgs,
        /// Use the template serialization instead of a chat endpoint.
        #[arg(long)]
        fallback: bool,
        /// Cache file; defaults to `<out>/anchor_cache.jsonl`.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Directory overriding the shipped prompt templates.
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
    },
    /// Embed an anchor file through the embeddings endpoint.
    Embed {
        #[arg(long)]
        anchors: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
    },
    /// Train and write checkpoint, log, assignments and manifest.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Precomputed embedding file (not needed for `--mode ttc`).
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Anchor file the embeddings were computed from.
        #[arg(long)]
        anchors: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        t_warm: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Train with seeds `seed..seed+R` into `seed-<s>/` subdirectories.
        #[arg(long)]
        repeat: Option<usize>,
    },
    /// Euclidean k-means on one-hot and standardized features.
    Baseline {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        repeat: Option<usize>,
    },
    /// Score assignments against truth labels.
    Eval {
        #[arg(long, requires = "truth")]
        assignments: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Aggregate `seed-<s>/` runs under this directory.
        #[arg(long, conflicts_with = "assignments")]
        runs: Option<PathBuf>,
        #[arg(long)]
        repeat: Option<usize>,
    },
    /// Write the tabular-branch representation of every row.
    Export {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Retrain with a fraction of anchors swapped between rows and report accuracy loss.
    Perturb {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        anchors: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.1, 0.2, 0.4])]
        epsilons: Vec<f64>,
        /// Number of seeds, starting at the configured seed.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum ModeArg {
    Full,
    Ttc,
    Tlc,
    Tcc,
}

impl From<ModeArg> for AblationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => AblationMode::Full,
            ModeArg::Ttc => AblationMode::Ttc,
            ModeArg::Tlc => AblationMode::Tlc,
            ModeArg::Tcc => AblationMode::Tcc,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}

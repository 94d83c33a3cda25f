mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctr_core::CtrError;

/// Error carried to the exit path: usage problems exit 2, runtime failures exit 1.
#[derive(Debug)]
pub struct Failure {
    pub usage: bool,
    pub kind: String,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { usage: true, kind: "usage".into(), message: message.into() }
    }

    pub fn runtime(kind: impl Into<String>, message: impl Into<String>) -> Self {
        Self { usage: false, kind: kind.into(), message: message.into() }
    }

    fn record(&self) -> String {
        serde_json::json!({ "error": self.kind, "message": self.message }).to_string()
    }
}

impl From<CtrError> for Failure {
    fn from(e: CtrError) -> Self {
        let kind = match &e {
            CtrError::Config(_) => return Self::usage(e.to_string()),
            other => other.kind(),
        };
        Self::runtime(kind, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::runtime("io", e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::runtime("json", e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Failure>;

#[derive(Debug, Parser)]
#[command(name = "ctr", version, about = "Cumulative stay-time representation experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "CTR_OUTPUT_DIR")]
    pub out: Option<PathBuf>,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory with its ground-truth sidecar.
    Generate {
        /// Number of generating states (a perfect square for two dimensions).
        #[arg(long)]
        states: Option<usize>,
        #[arg(long)]
        records: Option<usize>,
    },
    /// Write per-record representations (and optionally summary-statistic features).
    Featurize {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Use a trained model's featurizer instead of a freshly fitted one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the summary-statistic features.
        #[arg(long = "static")]
        with_static: bool,
    },
    /// Train one model with a held-out validation split; writes a checkpoint and history.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Cross-validate the configured model, or score a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run every model kind on synthetic data under shared folds and write a comparison.
    Bench {
        /// Synthetic dataset directory written by `generate`; generated from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
        seeds: Vec<u64>,
        /// Entries checked per parameter block.
        #[arg(long, default_value_t = 200, conflicts_with = "full")]
        max_per_block: usize,
        /// Check every parameter.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Render tables and charts from a bench report, or compare two fold reports by
    /// observation period.
    Report {
        #[arg(long, conflicts_with_all = ["a", "b"])]
        bench: Option<PathBuf>,
        #[arg(long, requires = "b")]
        a: Option<PathBuf>,
        #[arg(long, requires = "a")]
        b: Option<PathBuf>,
        /// Dataset the fold reports were computed on.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", Failure::usage(e.to_string().trim_end()).record());
            return ExitCode::from(2);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.record());
            ExitCode::from(if f.usage { 2 } else { 1 })
        }
    }
}

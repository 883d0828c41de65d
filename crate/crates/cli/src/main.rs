//! `spt`: generate surrogate data, train, evaluate and inspect models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::TrainOverrides;

/// Bad input from the user: reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(
    name = "spt",
    version,
    about = "Stress-strain curves from small punch test load-displacement curves"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Write train.csv, test.csv and manifest.json.
    Generate {
        #[arg(long, default_value_t = spt_core::material::DEFAULT_TRAIN_SAMPLES)]
        n_train: usize,
        #[arg(long, default_value_t = spt_core::material::DEFAULT_TEST_SAMPLES)]
        n_test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Points per load-displacement curve.
        #[arg(long, default_value_t = 64)]
        l_in: usize,
        /// Points per stress-strain curve.
        #[arg(long, default_value_t = 64)]
        l_out: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes model.ckpt, loss.csv and config.json.
    Train {
        /// Data directory (train.csv) or a dataset CSV.
        #[arg(long)]
        data: PathBuf,
        /// JSON file with any subset of the training fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Drop the angular-field branch.
        #[arg(long)]
        baseline_1d: bool,
        /// Full 5-layer, 128-unit architecture instead of the desk model.
        #[arg(long)]
        paper_arch: bool,
        /// Use only the first N training samples.
        #[arg(long, default_value_t = commands::DEFAULT_TRAIN_LIMIT)]
        train_limit: usize,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Score a checkpoint on a dataset and write a JSON report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Data directory (test.csv) or a dataset CSV.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict the stress curve for one sample.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the angular-field image of each sample as PGM.
    ExportGaf {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Export a single sample instead of all of them.
        #[arg(long)]
        index: Option<usize>,
    },
    /// Overlay predicted and true stress for one sample (CSV + SVG).
    Plot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate {
            n_train,
            n_test,
            seed,
            l_in,
            l_out,
            out,
        } => commands::generate(n_train, n_test, seed, l_in, l_out, &out),
        Command::Train {
            data,
            config,
            out,
            baseline_1d,
            paper_arch,
            train_limit,
            overrides,
        } => commands::train(commands::TrainArgs {
            data: &data,
            config: config.as_deref(),
            out: &out,
            baseline_1d,
            paper_arch,
            train_limit,
            overrides: &overrides,
        }),
        Command::Evaluate { checkpoint, data, out } => commands::evaluate(&checkpoint, &data, out.as_deref()),
        Command::Predict {
            checkpoint,
            data,
            index,
            out,
        } => commands::predict(&checkpoint, &data, index, &out),
        Command::ExportGaf { data, out, index } => commands::export_gaf(&data, &out, index),
        Command::Plot {
            checkpoint,
            data,
            index,
            out,
        } => commands::plot(&checkpoint, &data, index, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

//! Batch front end for sequential ordinal spatio-temporal abundance models.
//!
//! Four subcommands cover the working cycle: `simulate` writes a synthetic
//! dataset from a ground-truth configuration, `fit` estimates a model and
//! archives the posterior, `predict` turns an archived fit into category
//! probabilities on a user grid, and `compare` ranks dependence variants by
//! DIC on shared data.  Exit codes: 0 on success, 2 on a data or
//! configuration error, 3 on a convergence or numerical failure.

mod commands;
mod config;
mod data;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stordinal::Error;

use commands::Common;

#[derive(Parser)]
#[command(
    name = "stordinal",
    version,
    about = "Sequential ordinal models with a separable space-time latent field"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the configured model; writes summary.csv, dic.csv, and fit.json.
    Fit(CommonArgs),
    /// Predict category probabilities on a grid from an archived fit;
    /// writes predictions.csv.
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        /// Fit archive produced by `fit` (default: OUT/fit.json).
        #[arg(long)]
        archive: Option<PathBuf>,
    },
    /// Generate a synthetic dataset from the config's ground truth; writes
    /// observations.csv, controls.csv, and truth.json.
    Simulate(CommonArgs),
    /// Fit two or more dependence variants on the same data and rank them
    /// by DIC; writes dic.csv.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated variants, e.g. M1,M3 (at least two).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config's `out`, then the working
    /// directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker thread count (default: one per logical CPU).
    #[arg(long)]
    threads: Option<usize>,
}

impl CommonArgs {
    fn into_common(self) -> Common {
        if let Some(n) = self.threads {
            // A second build_global call in-process is harmless: the first
            // pool wins and later calls return an error we ignore.
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .ok();
        }
        Common {
            config: self.config,
            seed: self.seed,
            out: self.out,
        }
    }
}

fn run(cli: Cli) -> stordinal::Result<()> {
    match cli.command {
        Command::Fit(args) => commands::cmd_fit(&args.into_common()),
        Command::Predict { common, archive } => {
            commands::cmd_predict(&common.into_common(), archive.as_deref())
        }
        Command::Simulate(args) => commands::cmd_simulate(&args.into_common()),
        Command::Compare { common, variants } => {
            commands::cmd_compare(&common.into_common(), &variants)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Invalid(_) | Error::Dimension(_) => 2,
        Error::Numerical(_) | Error::NoConvergence { .. } => 3,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! `epiad`: synthetic data, epipolar masks, pretraining, memory banks,
//! scoring, evaluation and ablations from the command line.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid input or configuration,
//! 3 numeric failure.

mod commands;
mod config;
mod summary;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use epiad::Error;

use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "epiad", version, about = "Epipolar-guided multi-view anomaly detection")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic multi-view dataset into --out.
    Synth {
        #[command(flatten)]
        flags: Overrides,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Estimate a fundamental matrix from point correspondences.
    EstimateF {
        /// JSON with `points` rows `[u_a, v_a, u_b, v_b]`.
        #[arg(long)]
        correspondences: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the epipolar mask of a view pair as a PGM image.
    Mask {
        #[command(flatten)]
        flags: Overrides,
        /// Views as `a,b`, by id or index.
        #[arg(long)]
        pair: String,
    },
    /// Pretrain the attention projections.
    Pretrain {
        #[command(flatten)]
        flags: Overrides,
    },
    /// Build the memory bank from (fused) training features.
    BuildBank {
        #[command(flatten)]
        flags: Overrides,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Score the test split against a memory bank.
    Score {
        #[command(flatten)]
        flags: Overrides,
        /// Bank index file or its directory.
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Also write per-view anomaly maps.
        #[arg(long)]
        heatmaps: bool,
    },
    /// Compute image, sample and patch level metrics for a score file.
    Eval {
        #[command(flatten)]
        flags: Overrides,
        #[arg(long)]
        scores: PathBuf,
    },
    /// Run the fusion and pretraining ablation matrix over several seeds.
    Ablate {
        #[command(flatten)]
        flags: Overrides,
        /// `0-4` or `0,1,2`.
        #[arg(long, default_value = "0-4")]
        seeds: String,
    },
    /// Pretrain, build the bank, score and evaluate in one go.
    Pipeline {
        #[command(flatten)]
        flags: Overrides,
        #[arg(long)]
        heatmaps: bool,
    },
}

fn exit_code(err: &Error) -> u8 {
    if err.is_io() {
        1
    } else if err.is_numeric() {
        3
    } else {
        2
    }
}

fn run(cli: Cli) -> epiad::Result<()> {
    let resolve = |flags: &Overrides| RunConfig::resolve(flags.config.as_deref(), flags);
    match cli.command {
        Command::Synth { flags, n_train, n_test } => {
            let mut cfg = resolve(&flags)?;
            cfg.n_train = n_train.unwrap_or(cfg.n_train);
            cfg.n_test = n_test.unwrap_or(cfg.n_test);
            commands::synth(&cfg)
        }
        Command::EstimateF { correspondences, out } => commands::estimate_f(&correspondences, &out),
        Command::Mask { flags, pair } => commands::mask(&resolve(&flags)?, &pair),
        Command::Pretrain { flags } => commands::pretrain(&resolve(&flags)?),
        Command::BuildBank { flags, weights } => commands::build_bank_cmd(&resolve(&flags)?, weights.as_deref()),
        Command::Score {
            flags,
            bank,
            weights,
            heatmaps,
        } => commands::score(&resolve(&flags)?, &bank, weights.as_deref(), heatmaps),
        Command::Eval { flags, scores } => commands::eval(&resolve(&flags)?, &scores),
        Command::Ablate { flags, seeds } => commands::ablate(&resolve(&flags)?, &commands::parse_seeds(&seeds)?),
        Command::Pipeline { flags, heatmaps } => commands::pipeline(&resolve(&flags)?, heatmaps),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("epiad: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("epiad: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

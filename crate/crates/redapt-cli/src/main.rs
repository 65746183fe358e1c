//! `redapt` — command-line front end for the encoder toolkit.
//!
//! Five subcommands: `flops` (closed-form cost report), `bench` (measured
//! throughput / latency / peak tracked allocation), `search` (greedy
//! backward selection over injection positions), `ablate` (toy training per
//! adaptor-flag variant), and `train` (one toy-task run). All of them read
//! the same configuration surface — a preset, an optional flat JSON config
//! file, and an optional `--positions` override — and write artifacts under
//! `--out`.
//!
//! Exit codes: 0 success, 1 usage (bad flags or flag values), 2 runtime
//! (bad config file, library errors, I/O).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod bench;
mod commands;
mod config;

/// What went wrong, split by whose fault it is: `Usage` maps to exit code 1
/// (fix the command line), `Runtime` to exit code 2 (fix the inputs or the
/// environment).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<redapt_core::Error> for CliError {
    fn from(e: redapt_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "redapt",
    version,
    about = "Cost reports, micro-benchmarks, position search, ablations, and toy training \
             for a transformer speech encoder with sequence-reducing adaptor blocks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct Common {
    /// Flat JSON config file applied on top of the preset (see config.rs
    /// for the key table).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Base preset: "desk" (runnable) or "w2v2-large-analytical" (cost
    /// model scale).
    #[arg(long, default_value = "desk")]
    preset: String,

    /// Adaptor injection positions as comma-separated layer indices; an
    /// empty string means none. Overrides the preset and config file.
    #[arg(long)]
    positions: Option<String>,

    /// Raw waveform length in samples.
    #[arg(long, default_value_t = 88_000)]
    raw_len: usize,

    /// Seed for parameter init, synthetic data, and augmentation draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Directory artifacts are written into (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form FLOPs/memory report at batch 1 (CSV + JSON).
    Flops {
        #[command(flatten)]
        common: Common,
    },
    /// Measured throughput, wall-time percentiles, and peak tracked
    /// allocation over seeded synthetic input.
    Bench {
        #[command(flatten)]
        common: Common,

        /// Sequences per forward pass.
        #[arg(long, default_value_t = 1)]
        batch: usize,

        /// Untimed iterations before measurement.
        #[arg(long, default_value_t = 1)]
        warmup: usize,

        /// Timed iterations (>= 1).
        #[arg(long, default_value_t = 3)]
        iters: usize,

        /// Comma-separated batch sizes; emits one CSV row per size instead
        /// of a single JSON report.
        #[arg(long)]
        sweep: Option<String>,

        /// Run even when layers*d_model exceeds the safety cap.
        #[arg(long)]
        allow_large: bool,

        /// Measure the data-parallel path instead of the default
        /// single-thread pass.
        #[arg(long)]
        parallel: bool,
    },
    /// Greedy backward selection over injection positions; emits a JSONL
    /// trace and a JSON summary.
    Search {
        #[command(flatten)]
        common: Common,

        /// Scoring rule: "neg-flops" (cheapest wins) or "constant"
        /// (score everything once, stay at the start).
        #[arg(long, default_value = "neg-flops")]
        evaluator: String,

        /// Candidate pool: "low-mid" (positions 2..2L/3) or "mid-top"
        /// (L/2..L).
        #[arg(long, default_value = "mid-top")]
        bucket: String,

        /// Upper bound on accepted moves.
        #[arg(long, default_value_t = 16)]
        max_rounds: usize,
    },
    /// Train the toy task once per adaptor-flag variant (full block, no
    /// second CNN, no layer norm, no layer norm + no GELU).
    Ablate {
        #[command(flatten)]
        common: Common,

        /// Optimisation steps per variant.
        #[arg(long, default_value_t = 200)]
        steps: usize,

        /// Clips per optimisation step.
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// One toy-task training run: metrics CSV, checkpoint, JSON summary.
    Train {
        #[command(flatten)]
        common: Common,

        /// Optimisation steps.
        #[arg(long, default_value_t = 200)]
        steps: usize,

        /// Clips per optimisation step.
        #[arg(long, default_value_t = 8)]
        batch_size: usize,

        /// Apply the default training augmentation policy.
        #[arg(long)]
        augment: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let resolve = |common: &Common| {
        config::resolve(&common.preset, common.config.as_deref(), common.positions.as_deref())
    };
    match &cli.command {
        Command::Flops { common } => {
            let cfg = resolve(common)?;
            commands::cmd_flops(&cfg, common.raw_len, &common.out)
        }
        Command::Bench { common, batch, warmup, iters, sweep, allow_large, parallel } => {
            let cfg = resolve(common)?;
            commands::cmd_bench(
                &cfg,
                common.raw_len,
                common.seed,
                &common.out,
                *batch,
                *warmup,
                *iters,
                sweep.as_deref(),
                *allow_large,
                *parallel,
            )
        }
        Command::Search { common, evaluator, bucket, max_rounds } => {
            let cfg = resolve(common)?;
            commands::cmd_search(&cfg, common.raw_len, &common.out, evaluator, bucket, *max_rounds)
        }
        Command::Ablate { common, steps, batch_size } => {
            let cfg = resolve(common)?;
            commands::cmd_ablate(&cfg, common.seed, &common.out, *steps, *batch_size)
        }
        Command::Train { common, steps, batch_size, augment } => {
            let cfg = resolve(common)?;
            commands::cmd_train(&cfg, common.seed, &common.out, *steps, *batch_size, *augment)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version arrive here too; clap marks them as
            // non-errors, so they keep exit code 0.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

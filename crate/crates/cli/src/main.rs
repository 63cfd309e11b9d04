//! `chip`: score, prune and analyse conv layers by channel independence.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use chip_core::DEFAULT_SEED;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "chip",
    version,
    about = "Channel-independence filter pruning toolkit"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Worker threads for per-layer and per-cell loops (1 = fully deterministic reductions).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "CHIP_OUT_DIR", default_value = "chip-out")]
    pub out_dir: PathBuf,
    /// Log filter, e.g. `info`, `debug`, `chip_core=trace`.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    /// Leave the timestamp out of CSV provenance lines.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Average per-sample CI scores for every layer of an activation dump.
    Score(commands::ScoreArgs),
    /// Turn score files and a layer-wise schedule into masks and a stats CSV.
    Prune(commands::PruneArgs),
    /// Compare greedy single-CI selection against exhaustive search.
    Oracle(commands::OracleArgs),
    /// Pearson correlation of score vectors across sample batches.
    Stability(commands::StabilityArgs),
    /// Per-channel rank change next to nuclear-norm change.
    MetricCompare(commands::MetricCompareArgs),
    /// Train the desk-scale net, prune with each criterion, fine-tune, report.
    Demo(commands::DemoArgs),
    /// Train the desk-scale net and dump its conv activations.
    Capture(commands::CaptureArgs),
}

/// A problem with the request itself rather than with running it.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let contract = err.chain().any(|cause| {
        cause.is::<UsageError>()
            || cause
                .downcast_ref::<chip_core::Error>()
                .is_some_and(chip_core::Error::is_contract_violation)
    });
    if contract {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.global.log_level)
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

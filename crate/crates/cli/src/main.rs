//! `hogrn` command-line tool.
//!
//! Exit codes: 0 success, 1 user error (bad flags, missing files, unknown
//! names, bad checkpoints), 2 internal error (numeric failure, divergence,
//! failed self-check).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hogrn::evaluation::Directions;

use crate::config::TrainFlags;

pub const DATA_DIR_ENV: &str = "HOGRN_DATA_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "hogrn",
    version,
    about = "Sparse knowledge-graph completion with HoGRN",
    args_override_self = true
)]
struct Cli {
    /// Log progress (per-epoch lines, warnings) to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct DataDir {
    /// Directory holding train.txt, valid.txt and test.txt.
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReportFormat {
    Table,
    Kv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExportFormat {
    Dot,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Entity, relation and triple counts plus out-degree statistics.
    Stats {
        #[command(flatten)]
        data: DataDir,
        #[arg(long, value_enum, default_value = "table")]
        format: ReportFormat,
    },
    /// Keep a random fraction of the training triples.
    Sparsify {
        #[command(flatten)]
        data: DataDir,
        #[arg(long)]
        out_dir: PathBuf,
        /// Fraction of training triples kept, in (0, 1].
        #[arg(long)]
        keep: f64,
        #[arg(long)]
        seed: u64,
    },
    /// Train a model; writes a checkpoint, its manifest and an epoch log.
    Train {
        #[command(flatten)]
        data: DataDir,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: u64,
        /// `key = value` file; flags override its entries.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Filtered link-prediction metrics of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        data: DataDir,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Defaults to the directions the model was validated with.
        #[arg(long)]
        directions: Option<Directions>,
        #[arg(long, value_enum, default_value = "table")]
        format: ReportFormat,
        /// Evaluation workers. Only 1 is supported.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Rank the relation paths linking a triple's head to its tail.
    Explain {
        #[command(flatten)]
        data: DataDir,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "head")]
        head_entity: String,
        #[arg(long)]
        relation: String,
        #[arg(long = "tail")]
        tail_entity: String,
        #[arg(short, long, default_value_t = 5)]
        k: usize,
        /// Longest path considered; at most the number of layers.
        #[arg(long, default_value_t = 2)]
        max_len: usize,
        #[arg(long, value_enum, default_value = "json")]
        format: ExportFormat,
        /// Write here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Finite-difference gradient checks and oracle comparisons.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the backward rule of one primitive (e.g. `gelu`) to show
        /// the checks catch it.
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
    },
}

/// Joins the error chain, skipping causes the outer message already quotes.
fn render(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

//! `openspan` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ReportFormat;

/// A problem with the invocation, configuration or input data.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser, Debug)]
#[command(name = "openspan", version, about = "Span-based open-label NER: train, evaluate and inspect corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes checkpoint.json, metrics.jsonl and report.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint at the given thresholds (default 0.5).
    Evaluate(EvalArgs),
    /// Evaluate a checkpoint over a threshold grid (default: the 7-value grid).
    Sweep(EvalArgs),
    /// Positive/negative span ratios and vocabulary coverage of a corpus.
    Stats(StatsArgs),
    /// Check JSONL files against the record schema and report remapping losses.
    ValidateData(ValidateArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training JSONL glob(s); replaces data.train.
    #[arg(long, num_args = 1..)]
    data: Vec<String>,
    /// Output directory; replaces `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validation thresholds, comma separated; replaces train.thresholds.
    #[arg(long)]
    thresholds: Option<String>,
    #[arg(long, value_enum)]
    format: Option<ReportFormat>,
    /// Root seed; replaces train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// `KIND` for the default tokenizer or `LANG=KIND`; KIND is whitespace,
    /// char_ngram:N or external. Repeatable.
    #[arg(long)]
    tokenizer: Vec<String>,
    #[arg(long)]
    max_span_len: Option<usize>,
    #[arg(long)]
    mask_word_boundaries: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluation JSONL glob(s); defaults to data.test of --config.
    #[arg(long, num_args = 1..)]
    data: Vec<String>,
    /// Optional TOML run configuration (data section and format).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated thresholds.
    #[arg(long)]
    thresholds: Option<String>,
    /// Report file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<ReportFormat>,
    /// Tokenizer override; must match the checkpoint's vocabulary. Repeatable.
    #[arg(long)]
    tokenizer: Vec<String>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long, num_args = 1..)]
    data: Vec<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Tokenizer kinds to compare. Repeatable; defaults to the configured ones.
    #[arg(long)]
    tokenizer: Vec<String>,
    #[arg(long)]
    max_span_len: Option<usize>,
    /// Also report rows with word-boundary masking applied.
    #[arg(long)]
    mask_word_boundaries: bool,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<ReportFormat>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long, num_args = 1..)]
    data: Vec<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Repeatable, as for `train`.
    #[arg(long)]
    tokenizer: Vec<String>,
    #[arg(long)]
    max_span_len: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<ReportFormat>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a, false),
        Command::Sweep(a) => commands::evaluate(a, true),
        Command::Stats(a) => commands::stats(a),
        Command::ValidateData(a) => commands::validate_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

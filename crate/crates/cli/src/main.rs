use std::path::PathBuf;
use std::process::ExitCode;

use annotator::annotate::AnnotateError;
use annotator::embeddings::EmbedError;
use clap::{Args, Parser, Subcommand};

mod annotate_cmd;
mod config;
mod data;
mod evaluate_cmd;
mod manifest;
mod report;
mod stats_cmd;

/// Exit status for usage errors (BSD `EX_USAGE`).
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(name = "annotator", version, about = "LLM-assisted NER corpus annotation")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Parse and validate a corpus and print its statistics as JSON.
    Ingest(data::IngestArgs),
    /// Partition the training split into sample space and targets.
    Split(data::SplitArgs),
    /// Embed the sample space, filling the embedding cache and saving an index.
    Embed(data::EmbedArgs),
    /// Annotate the targets of the training split with an LLM.
    Annotate(annotate_cmd::AnnotateArgs),
    /// Score annotations against gold labels.
    Evaluate(evaluate_cmd::EvaluateArgs),
    /// Friedman test, Conover post-hoc and critical-difference groups.
    Stats(stats_cmd::StatsArgs),
    /// Merge run directories into summary tables.
    Report(report::ReportArgs),
}

/// Corpus location and parsing options shared by several subcommands.
#[derive(Debug, Clone, Default, Args)]
pub struct CorpusArgs {
    /// Corpus directory (split files found by name) or a single training file.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Input format.
    #[arg(long, default_value = "conll", value_parser = ["conll"])]
    pub format: String,
    /// Zero-based tag column; defaults to the last column.
    #[arg(long, value_name = "N")]
    pub tag_col: Option<usize>,
    /// Tagging scheme on disk: bio (default) or iob1.
    #[arg(long)]
    pub scheme: Option<annotator::corpus::TagScheme>,
    /// Corpus name; defaults to the directory name.
    #[arg(long)]
    pub name: Option<String>,
    /// Label order for prompts, comma separated (a permutation of the label set).
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
    #[arg(long, value_name = "FILE")]
    pub train: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub valid: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub test: Option<PathBuf>,
}

fn is_provider_failure(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<AnnotateError>()
            .is_some_and(AnnotateError::is_provider_failure)
            || matches!(e.downcast_ref::<EmbedError>(), Some(EmbedError::Provider { .. }))
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Ingest(a) => data::ingest(a),
        Command::Split(a) => data::split(a),
        Command::Embed(a) => data::embed(a),
        Command::Annotate(a) => annotate_cmd::run(a),
        Command::Evaluate(a) => evaluate_cmd::run(a),
        Command::Stats(a) => stats_cmd::run(a),
        Command::Report(a) => report::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_provider_failure(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

//! `emogist` command-line entry point.
//!
//! Every subcommand reads one run config (TOML or JSON, chosen by file
//! extension); flags given on the command line override the file.
//! Summaries go to stdout as JSON, tables for `evaluate` and `tune`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 backend error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emogist::classifier::ModeKind;
use emogist::pipeline::{Pipeline, PipelineError, RunConfig};
use emogist::store::Split;

#[derive(Parser)]
#[command(
    name = "emogist",
    version,
    about = "Label-description image emotion classification"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Run config file (.toml or .json).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    store_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    mode: Option<ModeKind>,
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Comma-separated candidate k values for `tune`.
    #[arg(long, global = true, value_delimiter = ',')]
    k_candidates: Option<Vec<usize>>,
    /// Comma-separated seed list.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    ensemble_votes: Option<usize>,
    #[arg(long, global = true)]
    versions: Option<usize>,
    /// train, validation or test.
    #[arg(long, global = true, value_parser = parse_split)]
    split: Option<Split>,
    #[arg(long, global = true)]
    max_in_flight: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Embed the manifest and write the embedding store.
    Ingest,
    /// Cluster each label's train examples for every seed.
    Cluster,
    /// Generate the label descriptions the mode needs.
    Describe,
    /// Classify the configured split for every seed.
    Classify,
    /// Score prediction logs and write the report.
    Evaluate {
        /// Score these logs instead of the configured run's.
        #[arg(long = "log")]
        logs: Vec<PathBuf>,
    },
    /// Choose k on the validation split.
    Tune,
}

fn parse_split(s: &str) -> Result<Split, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown split `{s}` (train, validation, test)"))
}

fn load_config(path: &Path) -> Result<RunConfig, PipelineError> {
    let text = fs::read_to_string(path)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display()))),
        _ => RunConfig::from_json(&text),
    }
}

fn build_config(o: Overrides) -> Result<RunConfig, PipelineError> {
    let path = o
        .config
        .ok_or_else(|| PipelineError::Config("--config is required".into()))?;
    let mut cfg = load_config(&path)?;
    if let Some(v) = o.store_dir {
        cfg.store_dir = v;
    }
    if let Some(v) = o.manifest {
        cfg.manifest = Some(v);
    }
    if let Some(v) = o.output_dir {
        cfg.output_dir = v;
    }
    if let Some(v) = o.mode {
        cfg.mode = v;
    }
    if let Some(v) = o.k {
        cfg.k = Some(v);
    }
    if let Some(v) = o.k_candidates {
        cfg.k_candidates = v;
    }
    if let Some(v) = o.seeds {
        cfg.seeds = v;
    }
    if let Some(v) = o.ensemble_votes {
        cfg.ensemble_votes = Some(v);
    }
    if let Some(v) = o.versions {
        cfg.versions = Some(v);
    }
    if let Some(v) = o.split {
        cfg.split = v;
    }
    if let Some(v) = o.max_in_flight {
        cfg.max_in_flight = v;
    }
    Ok(cfg)
}

fn print_json(value: serde_json::Result<serde_json::Value>) {
    let value = value.expect("summary serializes");
    println!(
        "{}",
        serde_json::to_string_pretty(&value).expect("json prints")
    );
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = build_config(cli.overrides)?;
    let pipeline = Pipeline::new(cfg)?;
    match cli.command {
        Command::Ingest => print_json(serde_json::to_value(pipeline.ingest()?)),
        Command::Cluster => print_json(serde_json::to_value(pipeline.cluster()?)),
        Command::Describe => {
            let summary = pipeline.describe()?;
            log::info!(
                "cache hits {} misses {}",
                pipeline.cache().hits(),
                pipeline.cache().misses()
            );
            print_json(serde_json::to_value(summary));
        }
        Command::Classify => print_json(serde_json::to_value(pipeline.classify()?)),
        Command::Evaluate { logs } => {
            let logs = (!logs.is_empty()).then_some(logs);
            let report = pipeline.evaluate(logs.as_deref())?;
            print!("{}", report.to_table());
        }
        Command::Tune => print!("{}", pipeline.tune()?.to_table()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

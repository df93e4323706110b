//! `causnet`: one subcommand per pipeline stage, each reading and writing
//! plain files so stages can be cached and rerun independently.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Failure;

#[derive(Parser)]
#[command(name = "causnet", version, about = "Event-aware causal traffic speed forecasting")]
struct Cli {
    /// Seed applied to every seeded stage; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for event extraction. Training is single-threaded so
    /// that logs are reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn raw event reports into structured, scored records.
    ExtractEvents(commands::ExtractArgs),
    /// Estimate per-group event effects by propensity-score matching.
    BuildCkb(commands::BuildCkbArgs),
    /// Write a synthetic dataset with known injected effects.
    GenSynthetic(commands::GenArgs),
    /// Train the forecasting network with the three-phase schedule.
    Train(commands::TrainArgs),
    /// Write per-window forecasts.
    Predict(commands::ApplyArgs),
    /// Metrics and the causal-feature ablation.
    Evaluate(commands::EvaluateArgs),
    /// Mean and variance maps of the final attention block.
    ExportAttention(commands::AttentionArgs),
    /// Write the causal feature sequence of every segment.
    ExportFeatures(commands::FeaturesArgs),
    /// Print a knowledge base as an effect table.
    CkbReport(commands::ReportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { category, message }) => {
            eprintln!("error[{category}]: {message}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut config = match &cli.config {
        Some(path) => causnet::pipeline::PipelineConfig::load(path)?,
        None => Default::default(),
    };
    if let Some(seed) = cli.seed {
        config.reseed(seed);
    }
    let ctx = commands::Context {
        config,
        seed: cli.seed,
        threads: cli.threads.max(1),
    };
    match cli.command {
        Command::ExtractEvents(a) => commands::extract_events(&ctx, a),
        Command::BuildCkb(a) => commands::build_ckb(&ctx, a),
        Command::GenSynthetic(a) => commands::gen_synthetic(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Predict(a) => commands::predict(&ctx, a),
        Command::Evaluate(a) => commands::evaluate(&ctx, a),
        Command::ExportAttention(a) => commands::export_attention(&ctx, a),
        Command::ExportFeatures(a) => commands::export_features(&ctx, a),
        Command::CkbReport(a) => commands::ckb_report(a),
    }
}

//! `cmcrl`: synthetic corpora, pretraining, fine-tuning, evaluation and cluster reports.
//!
//! Failures print one line, `error[<kind>]: <message>`, to stderr and exit with status 1.
//! Usage errors exit with status 2.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toml::Value;

use config::Preset;

#[derive(Parser)]
#[command(name = "cmcrl", version, about = "Clustering-guided multi-layer contrastive pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a folder-per-class synthetic texture corpus.
    MakeSynthetic(MakeSyntheticArgs),
    /// Pretrain an encoder on the pretrain split; writes a checkpoint and the epoch log.
    Pretrain(PretrainArgs),
    /// Fit a linear head on the frozen encoder using the fine-tune split.
    Finetune(FinetuneArgs),
    /// Score encoder and head on the test split.
    Evaluate(EvaluateArgs),
    /// Cluster the pretrain split with a trained encoder and report cluster composition.
    ClusterReport(ClusterReportArgs),
}

#[derive(Args)]
struct OutputArgs {
    /// Output directory; relative paths are placed under the output root.
    #[arg(long)]
    out: PathBuf,
    /// Output root (overrides `output.root`).
    #[arg(long, env = "CMCRL_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct MakeSyntheticArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    classes: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(8..))]
    per_class: u64,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    size: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults the file and flags are applied on top of.
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// Corpus root (`data.corpus`).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set cluster.eps=0.5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", value_parser = config::parse_override)]
    set: Vec<(String, Value)>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    output: OutputArgs,
    /// Contrastive layers, e.g. `4` or `1,2,3,4` (encoder and loss).
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Training seed (`train.seed`).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Single-threaded, reproducible run.
    #[arg(long)]
    deterministic: bool,
    /// Continue from a pretrain checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    output: OutputArgs,
    /// Pretrain checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    output: OutputArgs,
    /// Pretrain checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Head checkpoint directory written by `finetune`.
    #[arg(long)]
    head: PathBuf,
}

#[derive(Args)]
struct ClusterReportArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    output: OutputArgs,
    /// Pretrain checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::MakeSynthetic(a) => commands::make_synthetic(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Finetune(a) => commands::finetune(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::ClusterReport(a) => commands::cluster_report(&a),
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<cmcrl_core::Error>())
        .map_or("cli", cmcrl_core::Error::kind)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let message = format!("{err:#}").replace('\n', " ");
            eprintln!("error[{}]: {message}", error_kind(&err));
            ExitCode::FAILURE
        }
    }
}

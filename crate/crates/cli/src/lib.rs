//! Command-line harness: train, generate, theory, eval, filter and
//! gradcheck subcommands over the `ple-core` library.

mod commands;
mod config;
mod files;

pub use config::{vocab_path, RunConfig};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "ple", version, about = "Path-locked dual-expert decoder toolkit")]
pub struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Report directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write its checkpoint and trajectory log.
    Train(TrainArgs),
    /// Decode a completion for a prompt.
    Generate(GenerateArgs),
    /// Run theory check families.
    Theory(TheoryArgs),
    /// Score a checkpoint for accuracy, length and reflective markers.
    Eval(EvalArgs),
    /// Filter candidate direct answers.
    Filter(FilterArgs),
    /// Audit gradients, expert decoupling and Hessian blocks.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Train on the synthetic task from the config instead of a dataset file.
    #[arg(long, conflicts_with = "dataset")]
    pub synth: bool,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    /// Whitespace-tokenized prompt text.
    pub prompt: String,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Defaults to the file next to the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub max_new: usize,
    #[arg(long, conflicts_with = "temp")]
    pub greedy: bool,
    /// Sampling temperature; greedy decoding when absent.
    #[arg(long)]
    pub temp: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct TheoryArgs {
    /// Comma-separated check families; all of them when absent.
    #[arg(long, value_delimiter = ',')]
    pub checks: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long, default_value_t = 64)]
    pub probes: usize,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Both,
    Think,
    #[value(name = "no_think")]
    NoThink,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Records with an `answer` field; one prompt per distinct prompt text.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Evaluate on the synthetic task from the config.
    #[arg(long, conflicts_with = "dataset")]
    pub synth: bool,
    #[arg(long, value_enum, default_value_t = ModeArg::Both)]
    pub mode: ModeArg,
    /// Checkpoint to compare against; prints the delta table.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub max_new: usize,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct FilterArgs {
    /// JSON lines with `prompt` and `response`.
    #[arg(long)]
    pub candidates: PathBuf,
    /// One gold answer per line, aligned with the candidates.
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// Audit this checkpoint on `--dataset`; a fresh tiny model otherwise.
    #[arg(long, requires = "dataset")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub probes: usize,
    /// Coordinates compared against finite differences on a checkpoint.
    #[arg(long, default_value_t = 256)]
    pub coords: usize,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

/// Outcome of a subcommand that ran to completion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
}

pub fn run(cli: Cli) -> anyhow::Result<Status> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), cli.seed, cli.out.as_deref())?;
    std::fs::create_dir_all(&cfg.report_dir)?;
    match cli.command {
        Command::Train(a) => commands::train(cfg, a),
        Command::Generate(a) => commands::generate(cfg, a),
        Command::Theory(a) => commands::theory(cfg, a),
        Command::Eval(a) => commands::eval(cfg, a),
        Command::Filter(a) => commands::filter(cfg, a),
        Command::Gradcheck(a) => commands::gradcheck(cfg, a),
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! `ssmko`: train toy models, import prompt data, run knockout experiments
//! and render their figures.
//!
//! Exit codes: 0 ok, 1 usage or configuration error, 2 gate miss (training
//! below its accuracy target, failing self-check), 3 no usable data.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use ssmko::harness::SourceCategory;

#[derive(Parser, Debug)]
#[command(
    name = "ssmko",
    version,
    about = "Hidden-attention knockout experiments on selective state-space models"
)]
struct Cli {
    /// Output directory. Falls back to the experiment config's
    /// `output_dir`, then to `./ssmko-out`.
    #[arg(long, global = true, env = "SSMKO_OUT")]
    out: Option<PathBuf>,

    /// Worker threads for record-level parallelism (1 = sequential).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Print progress to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a toy model on a synthetic fact-recall task.
    Train(TrainArgs),
    /// Convert COUNTERFACT-style triplets into prompt records.
    ImportCounterfact(ImportArgs),
    /// Keep the records every given model answers correctly.
    Filter(FilterArgs),
    /// Knock each source category out of the last token over sliding windows.
    KnockoutSweep(SweepArgs),
    /// Repeat the sweep for several window sizes.
    WindowStudy(WindowStudyArgs),
    /// Subject knockout restricted to all / context-dependent / context-independent units.
    FeatureKnockout(WindowArgs),
    /// Per-token knockout heatmap for one prompt.
    Heatmap(HeatmapArgs),
    /// Last-token self-knockout over the final layers, before vs after.
    Scatter(WindowArgs),
    /// Run the self-verification suites.
    Check(CheckArgs),
    /// Write every layer's materialized attention for one prompt.
    DumpAttention(DumpArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TaskPreset {
    OneFact,
    #[value(name = "facts-512")]
    Facts512,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ModelKind {
    Ssd,
    Attention,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON run file with `task`, `kind`, `layers`, `embed_dim`, `train`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskPreset>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    kind: Option<ModelKind>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Convention {
    Complement,
    AfterSubject,
}

#[derive(Args, Debug)]
struct ImportArgs {
    /// JSON array or JSON Lines file.
    #[arg(long)]
    input: PathBuf,
    /// Reuse an existing vocabulary instead of building one.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Convention::Complement)]
    convention: Convention,
}

#[derive(Args, Debug)]
struct FilterArgs {
    /// Model archive; repeat to keep only records all models get right.
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SoftmaxMode {
    PreSoftmax,
    PostSoftmax,
}

/// Inputs shared by the experiment subcommands.
#[derive(Args, Debug, Clone)]
struct ExperimentArgs {
    /// Experiment config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    softmax_mode: Option<SoftmaxMode>,
    /// Keep records the model answers wrongly.
    #[arg(long)]
    no_filter: bool,
}

fn parse_category(s: &str) -> Result<SourceCategory, String> {
    SourceCategory::parse(s).map_err(|e| e.to_string())
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Window size; defaults to min(9, layers - 1).
    #[arg(long, conflicts_with = "window_sizes")]
    window: Option<usize>,
    /// Several window sizes, one chart each.
    #[arg(long, value_delimiter = ',')]
    window_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_category)]
    categories: Vec<SourceCategory>,
}

#[derive(Args, Debug)]
struct WindowStudyArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Defaults to 1,3,5,9,12,15, dropping sizes above the layer count.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_category)]
    categories: Vec<SourceCategory>,
}

#[derive(Args, Debug)]
struct WindowArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Window size; defaults to min(9, layers - 1) (scatter: min(9, layers)).
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Record id; `sxsw-demo` is built in when the dataset lacks it.
    #[arg(long, default_value = ssmko::harness::DEMO_ID)]
    prompt_id: String,
    /// Vocabulary for tokenizing the built-in prompt.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
enum Suite {
    DualPath,
    Decay,
    Contract,
    Isolation,
    Gradient,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// Run every suite (the default when no --suite is given).
    #[arg(long)]
    all: bool,
    #[arg(long, value_enum, value_delimiter = ',')]
    suite: Vec<Suite>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = ssmko::harness::DEMO_ID)]
    prompt_id: String,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Only this layer.
    #[arg(long)]
    layer: Option<usize>,
}

/// How a command ended, short of an error.
#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    GateMiss(String),
    Empty(String),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::GateMiss(msg)) => {
            eprintln!("gate missed: {msg}");
            ExitCode::from(2)
        }
        Ok(Outcome::Empty(msg)) => {
            eprintln!("no data: {msg}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use peftkit::evalkit::TaskKind;
use peftkit::model::{FfnVariant, LinearSite};
use peftkit::peft::Method;

#[derive(Parser, Debug)]
#[command(
    name = "peftkit",
    version,
    about = "Parameter-efficient fine-tuning toolkit"
)]
pub struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, env = "PEFTKIT_SEED", default_value_t = 0)]
    pub seed: u64,

    /// Where to write the run manifest. Defaults to the command's output
    /// location.
    #[arg(long, global = true, value_name = "PATH")]
    pub run_manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a randomly initialized model checkpoint.
    Init(InitArgs),
    /// Store every 2-D weight matrix as block-wise 4-bit codes.
    Quantize(QuantizeArgs),
    /// Train adapters on an instruction dataset.
    Finetune(FinetuneArgs),
    /// Fold LoRA adapters into the base weights.
    Merge(MergeArgs),
    /// Compare a base and a fine-tuned model on one task file.
    Eval(EvalArgs),
    /// Render a saved metric or fine-tuning report as text.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 259)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 2)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 256)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 64)]
    pub max_seq_len: usize,
    #[arg(long, default_value = "paper")]
    pub ffn_variant: FfnVariant,
    /// Replace an existing checkpoint directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Only 4 is supported.
    #[arg(long, default_value_t = 4)]
    pub bits: u32,
    #[arg(long, default_value_t = 64)]
    pub block: usize,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Adapter checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "lora")]
    pub method: Method,
    /// LoRA rank, adapter bottleneck width, or prefix length.
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    /// LoRA scale on `A·B`.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f32,
    /// Linear sites that receive LoRA pairs.
    #[arg(long, value_delimiter = ',', default_value = "q,k,v")]
    pub sites: Vec<LinearSite>,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 64)]
    pub max_seq_len: usize,
    /// Report path; defaults to `report.json` inside `--out`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub adapters: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub kind: TaskKind,
    /// Base model checkpoint.
    #[arg(long, conflicts_with = "base_predictions")]
    pub base: Option<PathBuf>,
    /// Adapters attached to the base side.
    #[arg(long, requires = "base")]
    pub base_adapters: Option<PathBuf>,
    /// Recorded base predictions over the task's records.
    #[arg(long)]
    pub base_predictions: Option<PathBuf>,
    /// Fine-tuned model checkpoint; defaults to `--base` when only
    /// `--ft-adapters` is given.
    #[arg(long, conflicts_with = "ft_predictions")]
    pub ft: Option<PathBuf>,
    /// Adapters attached to the fine-tuned side.
    #[arg(long, conflicts_with = "ft_predictions")]
    pub ft_adapters: Option<PathBuf>,
    /// Recorded fine-tuned predictions over the task's records.
    #[arg(long)]
    pub ft_predictions: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1.96)]
    pub z: f64,
    /// External base CI half-width for ΔK (requires `--ci-ft`).
    #[arg(long, requires = "ci_ft")]
    pub ci_base: Option<f64>,
    #[arg(long, requires = "ci_base")]
    pub ci_ft: Option<f64>,
    #[arg(long, default_value_t = 32)]
    pub max_new_tokens: usize,
    /// Report JSON path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// A metric report or fine-tuning report JSON file.
    pub input: PathBuf,
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use erase_core::backbone::BackboneSpec;

#[derive(Debug, Parser)]
#[command(
    name = "erase",
    version,
    about = "Object removal by test-time adaptation"
)]
pub struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic scene with its labels and replay fixtures.
    Scene(SceneArgs),
    /// Infer target, non-target and background tags and build the label map.
    Bfe(BfeArgs),
    /// Adapt on one image and sample the edited result.
    Run(RunArgs),
    /// Score removal outputs listed in a manifest.
    Eval(EvalArgs),
    /// Run a rank by iteration grid over a sample set.
    Sweep(SweepArgs),
    /// Serve the REST API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// External model clients. Fixtures take precedence over endpoints.
#[derive(Debug, Clone, Args)]
pub struct ClientArgs {
    /// Replay recorded exchanges from this JSON-lines file.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Chat-completions base URL for the vision-language model.
    #[arg(long)]
    pub mllm_endpoint: Option<String>,
    #[arg(long, default_value = "gpt-4o")]
    pub mllm_model: String,
    /// Environment variable holding the API key.
    #[arg(long, default_value = "OPENAI_API_KEY")]
    pub api_key_env: String,
    /// Base URL of the tag-to-mask service.
    #[arg(long)]
    pub tag2mask_endpoint: Option<String>,
    /// Append every live exchange to this fixture file.
    #[arg(long)]
    pub record: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    pub timeout_secs: u64,
}

#[derive(Debug, Args)]
pub struct BfeArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Binary target mask.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Prompt template replacing the built-in one.
    #[arg(long)]
    pub prompt: Option<PathBuf>,
    #[arg(long)]
    pub box_threshold: Option<f64>,
    #[arg(long)]
    pub mask_threshold: Option<f64>,
    #[command(flatten)]
    pub clients: ClientArgs,
}

/// Adaptation settings. Flags override the config file, which overrides
/// the backbone's defaults.
#[derive(Debug, Clone, Args)]
pub struct TuneArgs {
    /// JSON object or `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub strength: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Denoising steps at sampling time.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Drop the puzzle terms and train on reconstruction alone.
    #[arg(long)]
    pub recon_only: bool,
    /// `toy`, `toy:SEED` or `shim:HOST:PORT`.
    #[arg(long, default_value = "toy")]
    pub backbone: BackboneSpec,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Three-label mask (0 target, 1 non-target, 2 background).
    #[arg(long, conflicts_with = "bfe", required_unless_present = "bfe")]
    pub mask: Option<PathBuf>,
    /// A `bfe.json` written by `erase bfe`; supplies labels and tags.
    #[arg(long)]
    pub bfe: Option<PathBuf>,
    /// Comma-separated background tags, replacing any from `--bfe`.
    #[arg(long, value_delimiter = ',')]
    pub tags: Option<Vec<String>>,
    /// Skip adaptation and sample with a stored adapter archive.
    #[arg(long)]
    pub reuse_adapter: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub tune: TuneArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory of predictions named `<sample_id>.png`, used for lines
    /// without a `result` path.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the feature extractor.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also ask a judge model whether each removal succeeded.
    #[arg(long)]
    pub judge: bool,
    /// What the judge is told was removed.
    #[arg(long, default_value = "the masked object")]
    pub judge_target: String,
    #[command(flatten)]
    pub clients: ClientArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, conflicts_with = "scenes")]
    pub manifest: Option<PathBuf>,
    /// Synthetic scene seeds, used when no manifest is given.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub scenes: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    pub ranks: Option<Vec<usize>>,
    #[arg(long = "iterations", value_delimiter = ',')]
    pub iteration_grid: Option<Vec<usize>>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub feature_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub tune: TuneArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    #[arg(long, default_value = "toy")]
    pub backbone: BackboneSpec,
    #[command(flatten)]
    pub clients: ClientArgs,
}

//! `countlab`: operator surface for the annotation-free counting pipeline.
//!
//! Verbs: `generate` (datasets via the oracle renderer or a remote
//! generation service), `train` (the three stages), `infer` (DCGP and
//! baseline strategies), `evaluate` (MAE/MSE against ground truth), and
//! `ablate` (directional comparison tables). On failure a machine-readable
//! error record is printed to stderr and the exit code is nonzero.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing dependency: {what}")]
    MissingDependency { what: String, hint: String },
    #[error("config {path}: {message}")]
    Config { path: String, message: String },
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Gen(#[from] countlab::genclient::GenError),
    #[error(transparent)]
    Train(#[from] countlab::train::TrainError),
    #[error(transparent)]
    Model(#[from] countlab::models::ModelError),
    #[error(transparent)]
    Manifest(#[from] countlab::manifest::ManifestError),
    #[error(transparent)]
    Dcgp(#[from] countlab::dcgp::DcgpError),
    #[error(transparent)]
    Eval(#[from] countlab::eval::EvalError),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::MissingDependency { .. } => "missing_dependency",
            CliError::Config { .. } => "config",
            CliError::Image(_) => "image",
            CliError::Io(_) => "io",
            CliError::Gen(_) => "generation",
            CliError::Train(_) => "train",
            CliError::Model(_) => "model",
            CliError::Manifest(_) => "manifest",
            CliError::Dcgp(_) => "inference",
            CliError::Eval(_) => "evaluation",
        }
    }

    fn hint(&self) -> Option<&str> {
        match self {
            CliError::MissingDependency { hint, .. } => Some(hint),
            _ => None,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "countlab",
    version,
    about = "Annotation-free object counting: dataset generation, training, inference"
)]
struct Cli {
    /// TOML config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset root (overrides the config file and COUNTLAB_DATA_ROOT).
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Build a dataset and its manifest.
    Generate(GenerateArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Count objects in images.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Run a directional comparison table.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Sorting,
    Count,
    Density,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Oracle,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Sort,
    Count,
    Density,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Dcgp,
    Fixed,
    Gated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblateKind {
    Partition,
    CountTrain,
    Resolution,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    kind: DatasetKind,
    #[arg(long, value_enum, default_value = "oracle")]
    backend: BackendKind,
    /// Generation endpoint, remote backend only.
    #[arg(long)]
    endpoint: Option<String>,
    /// Reference images for the sorting dataset.
    #[arg(long, default_value_t = 10)]
    refs: u32,
    /// Decreased-count variants per reference.
    #[arg(long, default_value_t = 4)]
    n_minus: u32,
    /// Increased-count variants per reference.
    #[arg(long, default_value_t = 4)]
    n_plus: u32,
    /// Images per prompt-count category (count dataset).
    #[arg(long, default_value_t = 150)]
    per_category: u32,
    /// Zero-object rows (count dataset).
    #[arg(long, default_value_t = 800)]
    zero_rows: usize,
    /// Rows per density class (density dataset).
    #[arg(long, default_value_t = 60)]
    per_class: usize,
    /// Rows in the labeled test set.
    #[arg(long, default_value_t = 24)]
    test_images: usize,
    /// Smallest object count drawn for references / test rows.
    #[arg(long, default_value_t = 1)]
    count_min: u32,
    /// Largest object count drawn; also caps the count schedule.
    #[arg(long, default_value_t = 50)]
    count_max: u32,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    /// Square canvas edge for oracle scenes, pixels.
    #[arg(long)]
    canvas: Option<u32>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    /// Checkpoint to start from (required for count/density stages).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for checkpoint, log, and effective config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_weight: Option<f64>,
    #[arg(long)]
    lambda_bb: Option<f64>,
    /// Fine-tune the encoder during count training (ablation mode).
    #[arg(long)]
    finetune: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "dcgp")]
    strategy: StrategyArg,
    /// Partition rate M.
    #[arg(long, default_value_t = 3)]
    m: usize,
    /// Dense-area fraction above which a cell is recounted.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// Crop recount patches from the resized image even when a larger
    /// source is available.
    #[arg(long)]
    no_hybrid: bool,
    /// Report file (one JSON record per image).
    #[arg(long)]
    out: PathBuf,
    /// Write count-map overlays into this directory.
    #[arg(long)]
    overlay_dir: Option<PathBuf>,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Manifest with ground-truth counts.
    #[arg(long)]
    manifest: PathBuf,
    /// Report file produced by `countlab infer`.
    #[arg(long)]
    predictions: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    which: AblateKind,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled test manifest; defaults to <root>/test.jsonl.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Table output file (one JSON row per variant).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    m: usize,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = config::resolve(cli.config.as_deref(), cli.root.as_deref())?;
    match &cli.cmd {
        Cmd::Generate(args) => commands::cmd_generate(args, &cfg),
        Cmd::Train(args) => commands::cmd_train(args, &cfg),
        Cmd::Infer(args) => commands::cmd_infer(args, &cfg),
        Cmd::Evaluate(args) => commands::cmd_evaluate(args, &cfg),
        Cmd::Ablate(args) => commands::cmd_ablate(args, &cfg),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        let record = serde_json::json!({
            "error": {
                "kind": e.kind(),
                "message": e.to_string(),
                "hint": e.hint(),
            }
        });
        eprintln!("{record}");
        std::process::exit(1);
    }
}

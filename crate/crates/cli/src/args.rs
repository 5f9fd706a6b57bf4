//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use leafscan_core::dataset::DEFAULT_VALIDATION_FRACTION;
use leafscan_core::detector::{DEFAULT_CONFIDENCE_THRESHOLD, DEFAULT_NMS_THRESHOLD};

pub const DEFAULT_DATA_DIR: &str = "synthetic";
pub const DEFAULT_MODEL: &str = "model.ckpt";
pub const DEFAULT_KB: &str = "data/kb.json";

/// Leaf disease detection, classification and advisory service.
///
/// Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
#[derive(Debug, Parser)]
#[command(name = "leafscan", version)]
pub struct Cli {
    /// Seed for every random choice; identical invocations give identical artifacts.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Inspect, split or synthesize image datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train the backbone and classifier head.
    Train(TrainArgs),
    /// Train the leaf detector head on a frozen backbone.
    TrainDetector(TrainDetectorArgs),
    /// Evaluate a checkpoint on a labelled dataset.
    Eval(EvalArgs),
    /// Detect, crop and classify a single PPM image.
    Diagnose(DiagnoseArgs),
    /// Compare analytic and finite-difference gradients for every layer.
    Gradcheck(GradcheckArgs),
    /// Validate or search a knowledge base.
    #[command(subcommand)]
    Kb(KbCommand),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// List classes and sample counts of a class-per-directory tree.
    Scan {
        root: PathBuf,
        /// Also write a `path<TAB>label` manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stratified train/validation split written as two manifests.
    Split {
        root: PathBuf,
        #[arg(long, default_value_t = DEFAULT_VALIDATION_FRACTION)]
        val_fraction: f64,
        #[arg(long, default_value = "train.txt")]
        train_out: PathBuf,
        #[arg(long, default_value = "val.txt")]
        val_out: PathBuf,
    },
    /// Generate procedural leaf images with box annotations.
    Synth {
        #[arg(long, default_value = DEFAULT_DATA_DIR)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 150)]
        per_class: usize,
        #[arg(long, default_value_t = 128)]
        image_size: usize,
    },
}

/// Where training images come from: a directory split on the fly, or two
/// manifests.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Class-per-directory dataset root.
    #[arg(long, default_value = DEFAULT_DATA_DIR)]
    pub data: PathBuf,
    /// Training manifest; overrides --data together with --val-manifest.
    #[arg(long, requires = "val_manifest")]
    pub train_manifest: Option<PathBuf>,
    #[arg(long, requires = "train_manifest")]
    pub val_manifest: Option<PathBuf>,
    /// Validation share when splitting --data.
    #[arg(long, default_value_t = DEFAULT_VALIDATION_FRACTION)]
    pub val_fraction: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = DEFAULT_MODEL)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f32,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f32,
    /// Weight of the center-distance term.
    #[arg(long, default_value_t = 0.003)]
    pub lambda_metric: f64,
    /// Step size of the per-class center update.
    #[arg(long, default_value_t = 0.5)]
    pub center_rate: f64,
    /// Write per-epoch records as JSON lines here.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainDetectorArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Classifier checkpoint providing the frozen backbone.
    #[arg(long, default_value = DEFAULT_MODEL)]
    pub model: PathBuf,
    /// Output checkpoint; defaults to --model, which gains a detector head.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    pub learning_rate: f32,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f32,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = DEFAULT_CONFIDENCE_THRESHOLD)]
    pub confidence: f64,
    #[arg(long, default_value_t = DEFAULT_NMS_THRESHOLD)]
    pub nms: f64,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, default_value = DEFAULT_MODEL)]
    pub model: PathBuf,
    /// Class-per-directory dataset root.
    #[arg(long, default_value = DEFAULT_DATA_DIR, conflicts_with = "manifest")]
    pub data: PathBuf,
    /// Evaluate the samples listed in a manifest instead.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Print the full report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    pub image: PathBuf,
    #[arg(long, default_value = DEFAULT_MODEL)]
    pub model: PathBuf,
    /// Knowledge base used to resolve the top label.
    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_CONFIDENCE_THRESHOLD)]
    pub confidence: f64,
    #[arg(long, default_value_t = DEFAULT_NMS_THRESHOLD)]
    pub nms: f64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random input draws per layer, starting at --seed.
    #[arg(long, default_value_t = leafscan_core::gradcheck_suite::DEFAULT_SEEDS)]
    pub seeds: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum KbCommand {
    /// Load and validate a knowledge base file.
    Validate {
        #[arg(default_value = DEFAULT_KB)]
        path: PathBuf,
    },
    /// Ranked substring search over names, crops and symptoms.
    Search {
        query: String,
        #[arg(long, default_value = DEFAULT_KB)]
        kb: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// 0 picks a free port; the bound address is printed on startup.
    #[arg(long, default_value_t = leafscan_api::DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = DEFAULT_MODEL)]
    pub model: PathBuf,
    #[arg(long, default_value = DEFAULT_KB)]
    pub kb: PathBuf,
    /// Append-only request log.
    #[arg(long, default_value = "requests.jsonl")]
    pub store: PathBuf,
    #[arg(long, default_value_t = leafscan_api::DEFAULT_MAX_BODY_BYTES)]
    pub max_body_bytes: usize,
    #[arg(long, default_value_t = DEFAULT_CONFIDENCE_THRESHOLD)]
    pub confidence: f64,
    #[arg(long, default_value_t = DEFAULT_NMS_THRESHOLD)]
    pub nms: f64,
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "detdisc", version, about = "Detector discovery from strong and weak labels")]
pub struct Cli {
    /// Worker threads; all available cores when unset.
    #[arg(long, global = true, env = "DETDISC_THREADS")]
    pub threads: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark with hidden ground truth.
    GenSynth(GenSynthArgs),
    /// Run the staged training pipeline.
    Train(TrainArgs),
    /// Mine positive regions with a trained checkpoint.
    Mine(MineArgs),
    /// Compute detection AP/mAP and mined-box precision.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    GradCheck(GradCheckArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenSynth(_) => "gen-synth",
            Command::Train(_) => "train",
            Command::Mine(_) => "mine",
            Command::Eval(_) => "eval",
            Command::GradCheck(_) => "grad-check",
        }
    }

    pub fn out_dir(&self) -> &PathBuf {
        match self {
            Command::GenSynth(a) => &a.out,
            Command::Train(a) => &a.out,
            Command::Mine(a) => &a.out,
            Command::Eval(a) => &a.out,
            Command::GradCheck(a) => &a.out,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// TOML file with synthetic-data settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "DETDISC_OUT_DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub cluster_separation: Option<f64>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub regions_per_bag: Option<usize>,
    /// Enable a seeded random weak-split transform of this strength.
    #[arg(long)]
    pub transform_strength: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset (JSON lines).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "DETDISC_OUT_DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs_init: Option<usize>,
    #[arg(long)]
    pub epochs_strong: Option<usize>,
    #[arg(long)]
    pub epochs_joint: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Number of representation layers (0 gives the identity).
    #[arg(long)]
    pub repr_layers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// TOML file with mining settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "DETDISC_OUT_DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub max_latent_iters: Option<usize>,
    /// Narrow candidates by the category score alone.
    #[arg(long)]
    pub no_background_margin: bool,
    /// Round number recorded in the assignments.
    #[arg(long, default_value_t = 1)]
    pub round: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset whose bags are scored.
    #[arg(long)]
    pub data: PathBuf,
    /// Ground truth: a generator truth file or a `{"boxes": ...}` object.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Checkpoint to evaluate as a detector.
    #[arg(long, required_unless_present = "assignments")]
    pub checkpoint: Option<PathBuf>,
    /// Mined assignments to score against ground truth.
    #[arg(long)]
    pub assignments: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "DETDISC_OUT_DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub iou_match: Option<f64>,
    #[arg(long)]
    pub nms_threshold: Option<f64>,
    /// Comma-separated categories to evaluate.
    #[arg(long, value_delimiter = ',')]
    pub categories: Option<Vec<String>>,
    /// Also write precision-recall points as text columns.
    #[arg(long)]
    pub pr_curves: bool,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "DETDISC_OUT_DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fixtures: Option<usize>,
    /// Representation widths, input first, e.g. `4,6,3`.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    /// Debug: perturb analytic gradients so the check must fail.
    #[arg(long)]
    pub corrupt_gradient: bool,
}

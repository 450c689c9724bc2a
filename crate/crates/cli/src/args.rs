use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rrn_core::data::DataFormat;
use rrn_core::trainer::Ablation;

#[derive(Parser, Debug)]
#[command(name = "rrn", version, about = "Non-rigid structure-from-motion with residual-recursive networks")]
pub struct Cli {
    /// Log progress to stderr (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic low-rank deforming dataset with ground truth.
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a dataset's ground truth.
    Eval(EvalArgs),
    /// Write the per-frame shape representations as CSV.
    ExportRepr(ExportArgs),
    /// Train once per noise level and keep fraction and tabulate e3D.
    Sweep(SweepArgs),
    /// Print the singular values of the stacked observation matrix.
    Rank(RankArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DatasetArgs {
    /// Dataset file.
    #[arg(long)]
    pub dataset: PathBuf,
    /// keypoints-json or mocap-csv (default: from the file extension).
    #[arg(long, value_parser = parse_format)]
    pub format: Option<DataFormat>,
}

fn parse_format(s: &str) -> Result<DataFormat, String> {
    s.parse().map_err(|e: rrn_core::Error| e.to_string())
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: rrn_core::Error| e.to_string())
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub p: usize,
    #[arg(long, default_value_t = 800)]
    pub f: usize,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Noise ratio ‖noise‖_F / ‖W‖_F.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub camera_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub shape_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_format)]
    pub format: Option<DataFormat>,
}

/// Training flags. Each one overrides the config file only when given.
#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// TOML file with training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for manifest, log and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "full", value_parser = parse_ablation)]
    pub ablation: Ablation,
    /// Fraction of leading frames used for training; the rest is scored as
    /// the test set. 1 trains on everything.
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    #[arg(long, default_value_t = 700)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.95)]
    pub decay: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 0.2)]
    pub lambda2: f64,
    #[arg(long, default_value_t = 0.02)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.04)]
    pub xi: f64,
    /// Memory bank capacity.
    #[arg(long, default_value_t = 1024)]
    pub bank: usize,
    /// Alternation block length in epochs.
    #[arg(long, default_value_t = 100)]
    pub block: usize,
    /// Apply both regularizers every epoch instead of alternating.
    #[arg(long)]
    pub joint: bool,
    /// Consistency targets from random rotations instead of swapped cameras.
    #[arg(long)]
    pub random_rotation: bool,
    #[arg(long, value_delimiter = ',', default_value = "128,64,32,16,8")]
    pub channels: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub recursion: usize,
    #[arg(long, value_delimiter = ',', default_value = "128,32,8,6")]
    pub rot_layers: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub checkpoint_every: usize,
    #[arg(long, default_value_t = 10)]
    pub eval_every: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Report file (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also fit a global scale per frame.
    #[arg(long)]
    pub scale: bool,
    /// Restrict alignment to proper rotations.
    #[arg(long)]
    pub no_reflection: bool,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "full", value_parser = parse_ablation)]
    pub ablation: Ablation,
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.2")]
    pub noise: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1,0.5,0.25")]
    pub keep: Vec<f64>,
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    /// Table file (CSV: setting,value,e3d_train,e3d_test).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RankArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
}

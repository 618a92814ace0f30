use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Learned LiDAR odometry on raw point clouds.
#[derive(Debug, Parser)]
#[command(name = "pcodom", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic rigid-motion dataset.
    Synth(SynthArgs),
    /// Train a network on a synthetic dataset or KITTI sequences.
    Train(TrainArgs),
    /// Estimate a trajectory with a trained checkpoint.
    Infer(InferArgs),
    /// Score estimated trajectories against ground truth.
    Eval(EvalArgs),
    /// Compare every gradient against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Points per cloud before dropout.
    #[arg(long, default_value_t = 1024)]
    pub points: usize,
    #[arg(long, default_value_t = 10.0)]
    pub max_rot_deg: f64,
    #[arg(long, default_value_t = 0.5)]
    pub max_trans: f64,
    /// Gaussian noise sigma on the second cloud, meters.
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    /// Half-width of the scene footprint, meters.
    #[arg(long, default_value_t = pcodom::kittio::SynthOptions::default().extent)]
    pub extent: f64,
    /// Output directory (default: `$PCODOM_OUT/synth`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Full,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Full => "full",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Average pooling instead of the embedding mask.
    NoMask,
    /// Masks are not refined from the coarser level.
    NoMaskOpt,
    /// Refinement without warping the first cloud.
    NoWarp,
    /// Only the coarsest pose.
    NoRefine,
    /// Equal neighbor weights in the cost volume.
    UniformCost,
    /// First embedding on the last pyramid level.
    FirstLast,
}

/// Where training and inference pairs come from.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Synthetic dataset directory written by `synth`.
    #[arg(long, conflicts_with = "kitti")]
    pub data: Option<PathBuf>,
    /// KITTI odometry root holding `sequences/` and `poses/`.
    #[arg(long)]
    pub kitti: Option<PathBuf>,
    /// Comma-separated sequence names, used with `--kitti`.
    #[arg(long, value_delimiter = ',', requires = "kitti")]
    pub sequences: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// `key = value` configuration file.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set lr=0.0005`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, value_enum)]
    pub ablation: Vec<Ablation>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub s_x: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub s_q: Option<f64>,
    /// Four comma-separated level weights.
    #[arg(long)]
    pub alphas: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub no_augment: bool,
    /// Continue from the checkpoint in the output directory.
    #[arg(long, conflicts_with_all = [
        "preset", "config", "overrides", "ablation", "batch_size", "lr", "beta1", "beta2",
        "s_x", "s_q", "alphas", "seed", "checkpoint_every", "no_augment",
    ])]
    pub resume: bool,
    /// Steps between progress lines in `train.log`.
    #[arg(long, default_value_t = 10)]
    pub log_every: u64,
    /// Output directory (default: `$PCODOM_OUT/train`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Build the network from this preset instead of the checkpoint's
    /// configuration.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Build the network from this configuration file instead.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the finest-level mask of every pair under `masks/`.
    #[arg(long)]
    pub export_masks: bool,
    /// Output directory (default: `$PCODOM_OUT/infer`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Estimated trajectories in KITTI pose format.
    #[arg(long, required = true, num_args = 1..)]
    pub est: Vec<PathBuf>,
    /// Ground-truth trajectories, in the same order as `--est`.
    #[arg(long, required = true, num_args = 1..)]
    pub gt: Vec<PathBuf>,
    /// Output directory for plot data (default: `$PCODOM_OUT/eval`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run only this op's check.
    #[arg(long)]
    pub op: Option<String>,
    /// Add a check with a deliberately wrong gradient under this name.
    #[arg(long, hide = true)]
    pub inject_broken: Option<String>,
    /// Output directory (default: `$PCODOM_OUT/gradcheck`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "blindsr", version, about = "Blind super-resolution with a diffusion-generated degradation/content prior")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Run config file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Named config preset (toy, small, baseline) used when --config is absent.
    #[arg(long, global = true, value_name = "NAME")]
    pub preset: Option<String>,
    /// Master seed; overrides `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Compute device. Only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "snake_case")]
pub enum Command {
    /// Degrade HR images into an LR dataset with a spec sidecar.
    Synth(SynthArgs),
    /// Run stage 1 or stage 2 training.
    Train(TrainArgs),
    /// Super-resolve an LR image or a directory of them.
    Infer(InferArgs),
    /// Score a model (or a baseline) over a degradation protocol.
    Eval(EvalArgs),
    /// Compare the four prior variants.
    Ablate(AblateArgs),
    /// Re-run a previous invocation from its manifest.
    #[serde(skip)]
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Infer(_) => "infer",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Directory of HR PNGs.
    #[arg(long, value_name = "DIR", conflicts_with = "synthetic")]
    pub hr_dir: Option<PathBuf>,
    /// Generate this many procedural HR images instead (also written to `hr/`).
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
    /// Side length of procedural HR images.
    #[arg(long, requires = "synthetic")]
    pub size: Option<usize>,
    /// Scale factor; defaults to the model scale of the config.
    #[arg(long)]
    pub scale: Option<usize>,
    /// Fixed isotropic kernel width. Without it each image draws a
    /// degradation from the config's training ranges.
    #[arg(long)]
    pub width: Option<f64>,
    /// Noise level (8-bit units) used with --width.
    #[arg(long, requires = "width")]
    pub noise: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Training stage.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: Option<u8>,
    /// Stage-1 checkpoint to start stage 2 from.
    #[arg(long, value_name = "CKPT")]
    pub init_from: Option<PathBuf>,
    /// Checkpoint to continue training from.
    #[arg(long, value_name = "CKPT", conflicts_with = "init_from")]
    pub resume: Option<PathBuf>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides `train.hr_dir`.
    #[arg(long, value_name = "DIR")]
    pub hr_dir: Option<PathBuf>,
    /// Also keep a numbered checkpoint (`stageS_eEEEEE.ckpt`) every N epochs.
    #[arg(long, value_name = "N")]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct InferArgs {
    /// Trained checkpoint (stage 2 for prior models).
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: PathBuf,
    /// LR image or directory of LR PNGs.
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[command(group = clap::ArgGroup::new("method").required(true).args(["checkpoint", "copy_hr_oracle", "bicubic"]))]
pub struct EvalArgs {
    /// Score this checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: Option<PathBuf>,
    /// Score the HR image itself (sanity baseline, 100 dB).
    #[arg(long)]
    pub copy_hr_oracle: bool,
    /// Score plain bicubic upscaling.
    #[arg(long)]
    pub bicubic: bool,
    /// `isotropic` or `general`.
    #[arg(long, default_value = "isotropic")]
    pub protocol: String,
    /// `y` or `rgb`.
    #[arg(long, default_value = "y")]
    pub metric_space: String,
    /// Evaluation images; defaults to the config's training set.
    #[arg(long, value_name = "DIR")]
    pub hr_dir: Option<PathBuf>,
    /// Protocol grid file replacing the built-in grids.
    #[arg(long, value_name = "FILE")]
    pub protocol_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct AblateArgs {
    /// One checkpoint per prior variant; pass the flag four times.
    #[arg(long = "checkpoint", value_name = "CKPT")]
    pub checkpoints: Vec<PathBuf>,
    /// `y` or `rgb`.
    #[arg(long, default_value = "y")]
    pub metric_space: String,
    /// Evaluation images; defaults to the config's training set.
    #[arg(long, value_name = "DIR")]
    pub hr_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct ReplayArgs {
    /// `manifest.json` written by an earlier run.
    pub manifest: PathBuf,
}

//! Run configuration: architecture, diffusion schedule, training knobs.
//!
//! Every field is readable from one TOML file (see `configs/` at the repo
//! root). Three named presets exist: `baseline`, `small` and `toy`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, FieldError, Result};

/// Which parts of the prior feed the injection modules.
///
/// `Full` is the complete model; the other three are the ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// Degradation and content branches (model4).
    Full,
    /// Degradation branch only (model2).
    Degradation,
    /// Content branch only (model3).
    Content,
    /// No prior; injection modules become plain layer norms (model1).
    None,
}

impl PriorMode {
    pub fn uses_prior(self) -> bool {
        self != PriorMode::None
    }

    pub fn ablation_name(self) -> &'static str {
        match self {
            PriorMode::None => "model1",
            PriorMode::Degradation => "model2",
            PriorMode::Content => "model3",
            PriorMode::Full => "model4",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Feature width of every conv in a branch.
    pub width: usize,
    /// Residual blocks after the stem.
    pub blocks: usize,
    /// Hidden width of the fusion MLP.
    pub mlp_hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub hidden: usize,
    pub blocks: usize,
    /// Sinusoidal time embedding size (even).
    pub time_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub scale: usize,
    pub channels: usize,
    pub groups: usize,
    pub blocks_per_group: usize,
    /// Attention window `(height, width)` in LR pixels.
    pub window: [usize; 2],
    pub heads: usize,
    /// Length of the prior vector.
    pub cdp_dim: usize,
    pub ffn_expansion: usize,
    /// Initial channel-attention temperature (`sqrt(HW)` of the training patch).
    pub cw_temperature_init: f64,
    pub prior: PriorMode,
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    /// Linear beta ramp endpoints; `alpha_t = 1 - beta_t`.
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Isotropic,
    Anisotropic,
    None,
}

/// Ranges from which one degradation per batch is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSampling {
    pub kernel: KernelFamily,
    pub kernel_size: usize,
    /// Isotropic width range, inclusive.
    pub width_range: [f64; 2],
    /// Anisotropic per-axis sigma range, inclusive.
    pub sigma_range: [f64; 2],
    /// Noise std range in 8-bit units.
    pub noise_range: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps per epoch; derived from the dataset size when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    pub lr_halving_period: usize,
    pub adam_betas: [f64; 2],
    pub alpha_rec: f64,
    /// LR-space patch side.
    pub patch_size: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub freeze_gt_encoder: bool,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hr_dir: Option<PathBuf>,
    /// Number of procedural HR images used when `hr_dir` is absent.
    #[serde(default = "default_synthetic_count")]
    pub synthetic_count: usize,
    pub degradation: DegradationSampling,
}

fn default_synthetic_count() -> usize {
    8
}

/// Everything a run needs, as stored in the TOML config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
}

impl EncoderConfig {
    fn standard() -> Self {
        Self { width: 64, blocks: 4, mlp_hidden: 256 }
    }
}

impl DenoiserConfig {
    fn standard() -> Self {
        Self { hidden: 512, blocks: 4, time_dim: 64 }
    }
}

impl ModelConfig {
    /// Full-size network: 6 groups x 3 blocks, 180 channels, 8x32 windows.
    pub fn baseline() -> Self {
        Self {
            scale: 4,
            channels: 180,
            groups: 6,
            blocks_per_group: 3,
            window: [8, 32],
            heads: 6,
            cdp_dim: 256,
            ffn_expansion: 2,
            cw_temperature_init: 48.0,
            prior: PriorMode::Full,
            encoder: EncoderConfig::standard(),
            denoiser: DenoiserConfig::standard(),
        }
    }

    /// Lightweight variant: 96 channels, 4x16 windows.
    pub fn small() -> Self {
        Self { channels: 96, window: [4, 16], heads: 4, ..Self::baseline() }
    }

    /// Desk-scale profile used by the acceptance runs.
    pub fn toy() -> Self {
        Self {
            scale: 4,
            channels: 32,
            groups: 1,
            blocks_per_group: 1,
            window: [4, 4],
            heads: 2,
            cdp_dim: 64,
            ffn_expansion: 2,
            cw_temperature_init: 8.0,
            prior: PriorMode::Full,
            encoder: EncoderConfig { width: 16, blocks: 4, mlp_hidden: 64 },
            denoiser: DenoiserConfig { hidden: 128, blocks: 4, time_dim: 32 },
        }
    }

    /// Short hex digest over the architecture; guards checkpoint loading.
    pub fn arch_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self, errs: &mut Vec<FieldError>) {
        let mut bad = |field: &str, reason: String| errs.push(FieldError { field: format!("model.{field}"), reason });
        if !(1..=4).contains(&self.scale) {
            bad("scale", format!("must be 1..=4, got {}", self.scale));
        }
        if self.channels == 0 {
            bad("channels", "must be positive".into());
        }
        if self.heads == 0 || self.channels % self.heads.max(1) != 0 {
            bad("heads", format!("{} heads do not divide {} channels", self.heads, self.channels));
        }
        if self.window[0] == 0 || self.window[1] == 0 {
            bad("window", "window dims must be positive".into());
        }
        if self.groups == 0 || self.blocks_per_group == 0 {
            bad("groups", "need at least one group and one block".into());
        }
        if self.cdp_dim == 0 {
            bad("cdp_dim", "must be positive".into());
        }
        if self.ffn_expansion == 0 {
            bad("ffn_expansion", "must be positive".into());
        }
        if !(self.cw_temperature_init > 0.0) {
            bad("cw_temperature_init", "must be positive".into());
        }
        if self.encoder.width == 0 || self.encoder.mlp_hidden == 0 {
            bad("encoder", "width and mlp_hidden must be positive".into());
        }
        if self.denoiser.hidden == 0 || self.denoiser.time_dim == 0 || self.denoiser.time_dim % 2 != 0 {
            bad("denoiser", "hidden must be positive and time_dim positive and even".into());
        }
    }
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { steps: 4, beta_start: 0.1, beta_end: 0.99 }
    }
}

impl DiffusionConfig {
    pub fn validate(&self, errs: &mut Vec<FieldError>) {
        let mut bad = |field: &str, reason: String| errs.push(FieldError { field: format!("diffusion.{field}"), reason });
        if self.steps == 0 {
            bad("steps", "must be at least 1".into());
        }
        for (name, v) in [("beta_start", self.beta_start), ("beta_end", self.beta_end)] {
            if !(v > 0.0 && v < 1.0) {
                bad(name, format!("must lie in (0, 1), got {v}"));
            }
        }
    }
}

impl DegradationSampling {
    pub fn fixed_isotropic(width: f64) -> Self {
        Self {
            kernel: KernelFamily::Isotropic,
            kernel_size: 21,
            width_range: [width, width],
            sigma_range: [0.2, 4.0],
            noise_range: [0.0, 0.0],
        }
    }
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        Self {
            epochs: 300,
            batch_size: 4,
            steps_per_epoch: None,
            lr: 1e-4,
            lr_halving_period: 125,
            adam_betas: [0.9, 0.99],
            alpha_rec: 0.01,
            patch_size: 48,
            grad_clip: 1.0,
            freeze_gt_encoder: true,
            seed: 0,
            hr_dir: None,
            synthetic_count: default_synthetic_count(),
            degradation: DegradationSampling {
                kernel: KernelFamily::Isotropic,
                kernel_size: 21,
                width_range: [0.2, 4.0],
                sigma_range: [0.2, 4.0],
                noise_range: [0.0, 0.0],
            },
        }
    }

    /// Overfit profile: 8 fixed pairs, full batch, one step per epoch.
    pub fn toy() -> Self {
        Self {
            epochs: 2000,
            batch_size: 8,
            steps_per_epoch: Some(1),
            lr: 2e-3,
            lr_halving_period: 700,
            patch_size: 8,
            degradation: DegradationSampling::fixed_isotropic(1.2),
            ..Self::full_scale()
        }
    }

    pub fn validate(&self, errs: &mut Vec<FieldError>) {
        let mut bad = |field: &str, reason: String| errs.push(FieldError { field: format!("train.{field}"), reason });
        if self.epochs == 0 {
            bad("epochs", "must be positive".into());
        }
        if self.batch_size == 0 {
            bad("batch_size", "must be positive".into());
        }
        if self.steps_per_epoch == Some(0) {
            bad("steps_per_epoch", "must be positive when given".into());
        }
        if !(self.lr > 0.0) {
            bad("lr", format!("must be positive, got {}", self.lr));
        }
        if self.lr_halving_period == 0 {
            bad("lr_halving_period", "must be positive".into());
        }
        for (i, b) in self.adam_betas.iter().enumerate() {
            if !(*b >= 0.0 && *b < 1.0) {
                bad(&format!("adam_betas[{i}]"), format!("must lie in [0, 1), got {b}"));
            }
        }
        if !(self.alpha_rec >= 0.0) {
            bad("alpha_rec", "must be non-negative".into());
        }
        if self.hr_dir.is_none() && self.synthetic_count == 0 {
            bad("synthetic_count", "must be positive when hr_dir is not set".into());
        }
        if self.patch_size == 0 {
            bad("patch_size", "must be positive".into());
        }
        if !(self.grad_clip >= 0.0) {
            bad("grad_clip", "must be non-negative".into());
        }
        let d = &self.degradation;
        if d.kernel_size % 2 == 0 {
            bad("degradation.kernel_size", format!("must be odd, got {}", d.kernel_size));
        }
        if !(d.width_range[0] >= 0.0 && d.width_range[0] <= d.width_range[1]) {
            bad("degradation.width_range", "need 0 <= lo <= hi".into());
        }
        if !(d.sigma_range[0] > 0.0 && d.sigma_range[0] <= d.sigma_range[1]) {
            bad("degradation.sigma_range", "need 0 < lo <= hi".into());
        }
        if !(d.noise_range[0] >= 0.0 && d.noise_range[0] <= d.noise_range[1]) {
            bad("degradation.noise_range", "need 0 <= lo <= hi".into());
        }
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "baseline" => Ok(Self { model: ModelConfig::baseline(), diffusion: DiffusionConfig::default(), train: TrainConfig::full_scale() }),
            "small" => Ok(Self { model: ModelConfig::small(), diffusion: DiffusionConfig::default(), train: TrainConfig::full_scale() }),
            "toy" => Ok(Self { model: ModelConfig::toy(), diffusion: DiffusionConfig::default(), train: TrainConfig::toy() }),
            other => Err(Error::config("preset", format!("unknown preset {other:?} (baseline|small|toy)"))),
        }
    }

    /// All field problems at once, or `Ok`.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        self.model.validate(&mut errs);
        self.diffusion.validate(&mut errs);
        self.train.validate(&mut errs);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

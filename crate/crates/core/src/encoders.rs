//! Prior encoders: `E_GT` sees the HR/LR pair and produces the prior vector
//! `Z0`; `E_LR` sees only the LR image and produces the condition `c`.

use blindsr_tensor::{lit, Ctx, ParamBuilder, Scalar, Tensor, Var};
use rand::Rng;

use crate::config::{EncoderConfig, PriorMode};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{global_avg_pool, leaky, Conv2d, Linear, NORM_EPS};

/// Space-to-depth: `H x W x 3` image to a `[1, 3 s^2, H/s, W/s]` tensor.
/// Channel `c * s^2 + dy * s + dx` holds pixel `(s*y + dy, s*x + dx)` of
/// colour plane `c`.
pub fn pixel_unshuffle<S: Scalar>(img: &Image<S>, s: usize) -> Result<Tensor<S>> {
    let (h, w) = img.dims();
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Shape(format!("pixel_unshuffle: {h}x{w} is not divisible by {s}")));
    }
    let (oh, ow) = (h / s, w / s);
    Ok(img.to_tensor().reshape(&[1, 3, oh, s, ow, s]).permute(&[0, 1, 3, 5, 2, 4]).reshape(&[1, 3 * s * s, oh, ow]))
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<S: Scalar>(t: &Tensor<S>, s: usize) -> Result<Image<S>> {
    let sh = t.shape();
    if sh.len() != 4 || sh[0] != 1 || s == 0 || sh[1] != 3 * s * s {
        return Err(Error::Shape(format!("pixel_shuffle: cannot fold {sh:?} by {s} into an RGB image")));
    }
    let (h, w) = (sh[2], sh[3]);
    let img = t.clone().reshape(&[1, 3, s, s, h, w]).permute(&[0, 1, 4, 2, 5, 3]);
    Image::new(h * s, w * s, img.into_data())
}

/// Conv stem followed by residual conv blocks and a global average pool.
#[derive(Clone, Debug)]
pub struct ConvBranch {
    stem: Conv2d,
    blocks: Vec<(Conv2d, Conv2d)>,
}

impl ConvBranch {
    pub fn new<S: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, S, R>, cin: usize, cfg: &EncoderConfig) -> Self {
        let stem = Conv2d::new(&mut pb.sub("stem"), cin, cfg.width, 3, true);
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let mut b = pb.sub(&format!("block{i}"));
                let c1 = Conv2d::new(&mut b.sub("conv1"), cfg.width, cfg.width, 3, true);
                let c2 = Conv2d::new(&mut b.sub("conv2"), cfg.width, cfg.width, 3, true);
                (c1, c2)
            })
            .collect();
        Self { stem, blocks }
    }

    /// `[N, cin, H, W] -> [N, width]`.
    pub fn forward<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, x: Var<'t, S>) -> Var<'t, S> {
        let mut h = leaky(self.stem.forward(ctx, x));
        for (c1, c2) in &self.blocks {
            h = h + c2.forward(ctx, leaky(c1.forward(ctx, h)));
        }
        global_avg_pool(h)
    }
}

/// Two linear layers with a LeakyReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new<S: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, S, R>, cin: usize, hidden: usize, cout: usize) -> Self {
        Self { fc1: Linear::new(&mut pb.sub("fc1"), cin, hidden), fc2: Linear::new(&mut pb.sub("fc2"), hidden, cout) }
    }

    pub fn forward<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, x: Var<'t, S>) -> Var<'t, S> {
        self.fc2.forward(ctx, leaky(self.fc1.forward(ctx, x)))
    }
}

/// `E_GT`. The degradation branch reads `concat(unshuffle(HR), LR)`, the
/// content branch reads HR; pooled features are concatenated into the MLP.
/// Either branch may be absent for the ablation variants. The output is
/// normalised to zero mean and unit variance per sample, which keeps the
/// diffusion target on the same scale as the chain noise.
#[derive(Clone, Debug)]
pub struct GtEncoder {
    scale: usize,
    degradation: Option<ConvBranch>,
    content: Option<ConvBranch>,
    mlp: Mlp,
}

impl GtEncoder {
    pub fn new<S: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, S, R>,
        scale: usize,
        mode: PriorMode,
        cfg: &EncoderConfig,
        cdp_dim: usize,
    ) -> Self {
        let use_deg = matches!(mode, PriorMode::Full | PriorMode::Degradation);
        let use_content = matches!(mode, PriorMode::Full | PriorMode::Content);
        let degradation = use_deg.then(|| ConvBranch::new(&mut pb.sub("deg"), 3 * scale * scale + 3, cfg));
        let content = use_content.then(|| ConvBranch::new(&mut pb.sub("content"), 3, cfg));
        let branches = usize::from(use_deg) + usize::from(use_content);
        let mlp = Mlp::new(&mut pb.sub("mlp"), branches * cfg.width, cfg.mlp_hidden, cdp_dim);
        Self { scale, degradation, content, mlp }
    }

    /// `hr: [N, 3, sH, sW]`, `lr: [N, 3, H, W]` to `Z0: [N, C_z]`.
    pub fn forward<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, hr: Var<'t, S>, lr: Var<'t, S>) -> Result<Var<'t, S>> {
        let (hs, ls) = (hr.shape(), lr.shape());
        let s = self.scale;
        if hs.len() != 4 || ls.len() != 4 || hs[0] != ls[0] || hs[2] != s * ls[2] || hs[3] != s * ls[3] {
            return Err(Error::Shape(format!("E_GT: HR {hs:?} is not {s}x LR {ls:?}")));
        }
        let mut pooled = Vec::with_capacity(2);
        if let Some(b) = &self.degradation {
            pooled.push(b.forward(ctx, Var::concat(&[hr.pixel_unshuffle(s), lr], 1)));
        }
        if let Some(b) = &self.content {
            pooled.push(b.forward(ctx, hr));
        }
        let feats = if pooled.len() == 1 { pooled[0] } else { Var::concat(&pooled, 1) };
        Ok(self.mlp.forward(ctx, feats).layer_norm_channels(lit(NORM_EPS)))
    }
}

/// `E_LR`: the degradation branch over the LR image alone, plus its MLP.
#[derive(Clone, Debug)]
pub struct LrEncoder {
    branch: ConvBranch,
    mlp: Mlp,
}

impl LrEncoder {
    pub fn new<S: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, S, R>, cfg: &EncoderConfig, cdp_dim: usize) -> Self {
        let branch = ConvBranch::new(&mut pb.sub("deg"), 3, cfg);
        let mlp = Mlp::new(&mut pb.sub("mlp"), cfg.width, cfg.mlp_hidden, cdp_dim);
        Self { branch, mlp }
    }

    /// `lr: [N, 3, H, W]` to `c: [N, C_z]`.
    pub fn forward<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, lr: Var<'t, S>) -> Var<'t, S> {
        self.mlp.forward(ctx, self.branch.forward(ctx, lr))
    }
}

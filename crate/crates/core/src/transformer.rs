//! The prior-guided SR network: conv stem, residual groups of refinement
//! blocks, and a pixel-shuffle reconstruction head. All feature maps are NCHW.

use blindsr_tensor::{lit, Ctx, ParamBuilder, ParamId, Scalar, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, ChannelNorm, Conv2d, Linear, NORM_EPS};

/// Prior injection: `scale(z) * LN(F) + shift(z)` with per-channel scale and
/// shift predicted from the prior. Without a prior it degrades to a plain
/// channel layer norm with a learned affine.
#[derive(Clone, Debug)]
pub enum Injection {
    Prior { scale: Linear, shift: Linear, channels: usize },
    Plain(ChannelNorm),
}

impl Injection {
    pub fn new<S: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, S, R>,
        channels: usize,
        cdp_dim: Option<usize>,
    ) -> Self {
        match cdp_dim {
            Some(cz) => Injection::Prior {
                // bias 1 so the untrained module starts as a plain layer norm
                scale: Linear::with_bias(&mut pb.sub("scale"), cz, channels, 1.0),
                shift: Linear::with_bias(&mut pb.sub("shift"), cz, channels, 0.0),
                channels,
            },
            None => Injection::Plain(ChannelNorm::new(&mut pb.sub("norm"), channels)),
        }
    }

    pub fn forward<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, f: Var<'t, S>, z: Option<Var<'t, S>>) -> Result<Var<'t, S>> {
        match self {
            Injection::Plain(norm) => Ok(norm.forward(ctx, f)),
            Injection::Prior { scale, shift, channels } => {
                let z = z.ok_or_else(|| Error::MissingComponent("prior vector for injection".into()))?;
                let (n, c) = (f.shape()[0], *channels);
                let zs = z.shape();
                if zs != [n, scale.in_dim] || f.shape()[1] != c {
                    return Err(Error::Shape(format!(
                        "injection: features {:?} / prior {zs:?} vs C={c}, C_z={}",
                        f.shape(),
                        scale.in_dim
                    )));
                }
                let a = scale.forward(ctx, z).reshape(&[n, c, 1, 1]);
                let b = shift.forward(ctx, z).reshape(&[n, c, 1, 1]);
                Ok(f.layer_norm_channels(lit(NORM_EPS)) * a + b)
            }
        }
    }
}

/// `[N, C, H, W]` to `[N * heads * Hn * Wn, wh * ww, C / heads]`.
pub fn window_partition<'t, S: Scalar>(x: Var<'t, S>, heads: usize, window: [usize; 2]) -> Var<'t, S> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let [wh, ww] = window;
    let d = c / heads;
    let (hn, wn) = (h / wh, w / ww);
    x.reshape(&[n, heads, d, hn, wh, wn, ww]).permute(&[0, 1, 3, 5, 4, 6, 2]).reshape(&[n * heads * hn * wn, wh * ww, d])
}

/// Inverse of [`window_partition`].
pub fn window_merge<'t, S: Scalar>(
    x: Var<'t, S>,
    shape: [usize; 4],
    heads: usize,
    window: [usize; 2],
) -> Var<'t, S> {
    let [n, c, h, w] = shape;
    let [wh, ww] = window;
    let d = c / heads;
    x.reshape(&[n, heads, h / wh, w / ww, wh, ww, d]).permute(&[0, 1, 6, 2, 4, 3, 5]).reshape(&[n, c, h, w])
}

/// Softmax attention within non-overlapping windows, scaled by `1/sqrt(d)`.
pub fn window_attention<'t, S: Scalar>(
    q: Var<'t, S>,
    k: Var<'t, S>,
    v: Var<'t, S>,
    heads: usize,
    window: [usize; 2],
) -> Result<Var<'t, S>> {
    let s = q.shape();
    if s.len() != 4 || s[2] % window[0] != 0 || s[3] % window[1] != 0 || s[1] % heads != 0 {
        return Err(Error::Shape(format!("window attention: map {s:?}, window {window:?}, {heads} heads")));
    }
    let d = s[1] / heads;
    let (qw, kw, vw) =
        (window_partition(q, heads, window), window_partition(k, heads, window), window_partition(v, heads, window));
    let attn = qw.matmul_ex(kw, false, true).mul_scalar(lit(1.0 / (d as f64).sqrt())).softmax();
    Ok(window_merge(attn.matmul(vw), [s[0], s[1], s[2], s[3]], heads, window))
}

/// Per-head `softmax(q k^T / alpha) v` over the `d x d` channel affinity;
/// spatial positions are the token axis. `alpha: [heads]`.
pub fn channel_attention<'t, S: Scalar>(
    q: Var<'t, S>,
    k: Var<'t, S>,
    v: Var<'t, S>,
    alpha: Var<'t, S>,
    heads: usize,
) -> Result<Var<'t, S>> {
    let s = q.shape();
    if s.len() != 4 || s[1] % heads != 0 || alpha.shape() != [heads] {
        return Err(Error::Shape(format!("channel attention: map {s:?}, alpha {:?}", alpha.shape())));
    }
    if alpha.value().data().iter().any(|a| !(a.as_f64().abs() > 0.0) || !a.is_finite()) {
        return Err(Error::Numerical { stage: "channel_attention temperature", step: 0 });
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = c / heads;
    let split = |x: Var<'t, S>| x.reshape(&[n, heads, d, hw]);
    let affinity = split(q).matmul_ex(split(k), false, true) / alpha.reshape(&[1, heads, 1, 1]);
    Ok(affinity.softmax().matmul(split(v)).reshape(&[n, c, s[2], s[3]]))
}

/// Spatial-window self-attention; bias-free Q/K/V projections, no output
/// projection.
#[derive(Clone, Debug)]
pub struct SwSa {
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub heads: usize,
    pub window: [usize; 2],
}

impl SwSa {
    pub fn new<S: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, S, R>, c: usize, heads: usize, window: [usize; 2]) -> Self {
        Self {
            q: Conv2d::new(&mut pb.sub("q"), c, c, 1, false),
            k: Conv2d::new(&mut pb.sub("k"), c, c, 1, false),
            v: Conv2d::new(&mut pb.sub("v"), c, c, 1, false),
            heads,
            window,
        }
    }

    pub fn forward<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let (q, k, v) = (self.q.forward(ctx, x), self.k.forward(ctx, x), self.v.forward(ctx, x));
        window_attention(q, k, v, self.heads, self.window)
    }
}

/// Channel-wise self-attention with a per-head learned temperature kept
/// positive by storing its logarithm.
#[derive(Clone, Debug)]
pub struct CwSa {
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub log_alpha: ParamId,
    pub heads: usize,
}

impl CwSa {
    pub fn new<S: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, S, R>, c: usize, heads: usize, alpha_init: f64) -> Self {
        Self {
            q: Conv2d::new(&mut pb.sub("q"), c, c, 1, false),
            k: Conv2d::new(&mut pb.sub("k"), c, c, 1, false),
            v: Conv2d::new(&mut pb.sub("v"), c, c, 1, false),
            log_alpha: pb.constant("log_alpha", &[heads], alpha_init.ln()),
            heads,
        }
    }

    pub fn forward<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let (q, k, v) = (self.q.forward(ctx, x), self.k.forward(ctx, x), self.v.forward(ctx, x));
        channel_attention(q, k, v, ctx.param(self.log_alpha).exp(), self.heads)
    }
}

/// `sigmoid(conv7x7(concat(mean_c F, max_c F)))`: one gate per position.
#[derive(Clone, Debug)]
pub struct SpatialDistiller {
    pub conv: Conv2d,
}

impl SpatialDistiller {
    pub fn new<S: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, S, R>) -> Self {
        Self { conv: Conv2d::new(pb, 2, 1, 7, true) }
    }

    pub fn forward<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, f: Var<'t, S>) -> Var<'t, S> {
        let pooled = Var::concat(&[f.mean_axis(1), f.max_axis(1)], 1);
        self.conv.forward(ctx, pooled).sigmoid()
    }
}

/// `sigmoid(conv1x1(GAP(F)))`: one gate per channel, shape `[N, C, 1, 1]`.
#[derive(Clone, Debug)]
pub struct ChannelDistiller {
    pub conv: Conv2d,
}

impl ChannelDistiller {
    pub fn new<S: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, S, R>, c: usize) -> Self {
        Self { conv: Conv2d::new(pb, c, c, 1, true) }
    }

    pub fn forward<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, f: Var<'t, S>) -> Var<'t, S> {
        let s = f.shape();
        let g = global_avg_pool(f).reshape(&[s[0], s[1], 1, 1]);
        self.conv.forward(ctx, g).sigmoid()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterflowKind {
    /// `F_attn * S(F_conv) + F_conv * C(F_attn)`.
    Spatial,
    /// `F_attn * C(F_conv) + F_conv * S(F_attn)`.
    Channel,
}

/// Cross-gating between the attention and convolution branches.
#[derive(Clone, Debug)]
pub struct Interflow {
    pub kind: InterflowKind,
    pub spatial: SpatialDistiller,
    pub channel: ChannelDistiller,
}

impl Interflow {
    pub fn new<S: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, S, R>, c: usize, kind: InterflowKind) -> Self {
        Self {
            kind,
            spatial: SpatialDistiller::new(&mut pb.sub("spatial")),
            channel: ChannelDistiller::new(&mut pb.sub("channel"), c),
        }
    }

    /// Gates `(for F_attn, for F_conv)` as computed from the opposite branch.
    pub fn gates<'t, S: Scalar>(
        &self,
        ctx: &Ctx<'t, S>,
        f_attn: Var<'t, S>,
        f_conv: Var<'t, S>,
    ) -> (Var<'t, S>, Var<'t, S>) {
        match self.kind {
            InterflowKind::Spatial => (self.spatial.forward(ctx, f_conv), self.channel.forward(ctx, f_attn)),
            InterflowKind::Channel => (self.channel.forward(ctx, f_conv), self.spatial.forward(ctx, f_attn)),
        }
    }

    pub fn forward<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, f_attn: Var<'t, S>, f_conv: Var<'t, S>) -> Result<Var<'t, S>> {
        if f_attn.shape() != f_conv.shape() {
            return Err(Error::Shape(format!("interflow: {:?} vs {:?}", f_attn.shape(), f_conv.shape())));
        }
        let (g_attn, g_conv) = self.gates(ctx, f_attn, f_conv);
        Ok(combine(f_attn, f_conv, g_attn, g_conv))
    }
}

/// `F_attn * g_attn + F_conv * g_conv` with broadcasting gates.
pub fn combine<'t, S: Scalar>(f_attn: Var<'t, S>, f_conv: Var<'t, S>, g_attn: Var<'t, S>, g_conv: Var<'t, S>) -> Var<'t, S> {
    f_attn * g_attn + f_conv * g_conv
}

/// Pointwise `C -> eC`, GELU, `eC -> C`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl Ffn {
    pub fn new<S: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, S, R>, c: usize, expansion: usize) -> Self {
        Self {
            fc1: Conv2d::new(&mut pb.sub("fc1"), c, c * expansion, 1, true),
            fc2: Conv2d::new(&mut pb.sub("fc2"), c * expansion, c, 1, true),
        }
    }

    pub fn forward<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, x: Var<'t, S>) -> Var<'t, S> {
        self.fc2.forward(ctx, self.fc1.forward(ctx, x).gelu())
    }
}

/// Refinement block: spatial half (injection, window attention with a
/// depthwise conv, spatial interflow, FFN) then channel half (injection,
/// channel attention with a depthwise conv, channel interflow, FFN).
#[derive(Clone, Debug)]
pub struct Cdrb {
    pub inject: [Injection; 4],
    pub swsa: SwSa,
    pub dconv1: Conv2d,
    pub interflow_s: Interflow,
    pub ffn1: Ffn,
    pub cwsa: CwSa,
    pub dconv2: Conv2d,
    pub interflow_c: Interflow,
    pub ffn2: Ffn,
}

impl Cdrb {
    pub fn new<S: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, S, R>, cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        let cz = cfg.prior.uses_prior().then_some(cfg.cdp_dim);
        let mut inj = |i: usize| Injection::new(&mut pb.sub(&format!("inject{i}")), c, cz);
        let inject = [inj(1), inj(2), inj(3), inj(4)];
        Self {
            inject,
            swsa: SwSa::new(&mut pb.sub("swsa"), c, cfg.heads, cfg.window),
            dconv1: Conv2d::depthwise(&mut pb.sub("dconv1"), c, 3),
            interflow_s: Interflow::new(&mut pb.sub("interflow_s"), c, InterflowKind::Spatial),
            ffn1: Ffn::new(&mut pb.sub("ffn1"), c, cfg.ffn_expansion),
            cwsa: CwSa::new(&mut pb.sub("cwsa"), c, cfg.heads, cfg.cw_temperature_init),
            dconv2: Conv2d::depthwise(&mut pb.sub("dconv2"), c, 3),
            interflow_c: Interflow::new(&mut pb.sub("interflow_c"), c, InterflowKind::Channel),
            ffn2: Ffn::new(&mut pb.sub("ffn2"), c, cfg.ffn_expansion),
        }
    }

    pub fn forward<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, x: Var<'t, S>, z: Option<Var<'t, S>>) -> Result<Var<'t, S>> {
        let h = self.inject[0].forward(ctx, x, z)?;
        let f2 = self.interflow_s.forward(ctx, self.swsa.forward(ctx, h)?, self.dconv1.forward(ctx, h))? + x;
        let f3 = self.ffn1.forward(ctx, self.inject[1].forward(ctx, f2, z)?) + f2;
        let h3 = self.inject[2].forward(ctx, f3, z)?;
        let f4 = self.interflow_c.forward(ctx, self.cwsa.forward(ctx, h3)?, self.dconv2.forward(ctx, h3))? + f3;
        Ok(self.ffn2.forward(ctx, self.inject[3].forward(ctx, f4, z)?) + f4)
    }
}

#[derive(Clone, Debug)]
pub struct ResidualGroup {
    pub blocks: Vec<Cdrb>,
    pub conv: Conv2d,
}

/// Conv stem, residual groups, global residual, pixel-shuffle upsampler and
/// an output conv. Inputs are reflect-padded to window multiples and the
/// output cropped back.
#[derive(Clone, Debug)]
pub struct SrNetwork {
    pub stem: Conv2d,
    pub groups: Vec<ResidualGroup>,
    pub upsample: Vec<(Conv2d, usize)>,
    pub head: Conv2d,
    pub scale: usize,
    pub window: [usize; 2],
}

/// Shuffle factors realising `scale`: repeated x2 for powers of two, one x3
/// stage for 3, nothing for 1.
pub fn upsample_factors(scale: usize) -> Result<Vec<usize>> {
    match scale {
        1 => Ok(vec![]),
        3 => Ok(vec![3]),
        s if s.is_power_of_two() => Ok(vec![2; s.trailing_zeros() as usize]),
        s => Err(Error::config("model.scale", format!("no pixel-shuffle factorisation for scale {s}"))),
    }
}

impl SrNetwork {
    pub fn new<S: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, S, R>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        let stem = Conv2d::new(&mut pb.sub("stem"), 3, c, 3, true);
        let groups = (0..cfg.groups)
            .map(|g| {
                let mut gp = pb.sub(&format!("group{g}"));
                let blocks = (0..cfg.blocks_per_group).map(|b| Cdrb::new(&mut gp.sub(&format!("block{b}")), cfg)).collect();
                let conv = Conv2d::new(&mut gp.sub("conv"), c, c, 3, true);
                ResidualGroup { blocks, conv }
            })
            .collect();
        let upsample = upsample_factors(cfg.scale)?
            .into_iter()
            .enumerate()
            .map(|(i, r)| (Conv2d::new(&mut pb.sub(&format!("up{i}")), c, c * r * r, 3, true), r))
            .collect();
        let head = Conv2d::new(&mut pb.sub("head"), c, 3, 3, true);
        Ok(Self { stem, groups, upsample, head, scale: cfg.scale, window: cfg.window })
    }

    /// `lr: [N, 3, H, W]`, `z: [N, C_z]` (ignored without prior injection) to
    /// `[N, 3, sH, sW]`.
    pub fn forward<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, lr: Var<'t, S>, z: Option<Var<'t, S>>) -> Result<Var<'t, S>> {
        let s = lr.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("SR input must be [N, 3, H, W], got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let pad_h = (self.window[0] - h % self.window[0]) % self.window[0];
        let pad_w = (self.window[1] - w % self.window[1]) % self.window[1];
        let x = lr.pad_reflect(pad_h, pad_w);
        let shallow = self.stem.forward(ctx, x);
        let mut f = shallow;
        for g in &self.groups {
            let mut y = f;
            for b in &g.blocks {
                y = b.forward(ctx, y, z)?;
            }
            f = g.conv.forward(ctx, y) + f;
        }
        let mut up = f + shallow;
        for (conv, r) in &self.upsample {
            up = conv.forward(ctx, up).pixel_shuffle(*r);
        }
        Ok(self.head.forward(ctx, up).crop(h * self.scale, w * self.scale))
    }
}

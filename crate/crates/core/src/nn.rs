//! Parameterised building blocks shared by the encoders, the denoiser and the
//! SR network. Each layer only stores [`ParamId`]s; forward passes bind the
//! values through a [`Ctx`].

use blindsr_tensor::{lit, Ctx, ParamBuilder, ParamId, Scalar, Var};
use rand::Rng;

pub const LEAKY_SLOPE: f64 = 0.1;

pub fn leaky<'t, S: Scalar>(x: Var<'t, S>) -> Var<'t, S> {
    x.leaky_relu(lit(LEAKY_SLOPE))
}

/// `y = x W^T + b` over `[N, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, S, R>, in_dim: usize, out_dim: usize) -> Self {
        let weight = pb.uniform("weight", &[out_dim, in_dim], in_dim);
        let bias = Some(pb.uniform("bias", &[out_dim], in_dim));
        Self { weight, bias, in_dim, out_dim }
    }

    /// Weight with default init, bias filled with `bias_value`.
    pub fn with_bias<S: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, S, R>,
        in_dim: usize,
        out_dim: usize,
        bias_value: f64,
    ) -> Self {
        let weight = pb.uniform("weight", &[out_dim, in_dim], in_dim);
        let bias = Some(pb.constant("bias", &[out_dim], bias_value));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, x: Var<'t, S>) -> Var<'t, S> {
        let y = x.matmul_ex(ctx.param(self.weight), false, true);
        match self.bias {
            Some(b) => y + ctx.param(b),
            None => y,
        }
    }
}

/// Stride-1 "same" convolution over NCHW maps (`groups` is 1 or depthwise).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub groups: usize,
}

impl Conv2d {
    pub fn new<S: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, S, R>,
        cin: usize,
        cout: usize,
        kernel: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = pb.uniform("weight", &[cout, cin, kernel, kernel], fan_in);
        let bias = bias.then(|| pb.uniform("bias", &[cout], fan_in));
        Self { weight, bias, kernel, groups: 1 }
    }

    pub fn depthwise<S: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, S, R>, channels: usize, kernel: usize) -> Self {
        let fan_in = kernel * kernel;
        let weight = pb.uniform("weight", &[channels, 1, kernel, kernel], fan_in);
        let bias = Some(pb.uniform("bias", &[channels], fan_in));
        Self { weight, bias, kernel, groups: channels }
    }

    pub fn forward<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, x: Var<'t, S>) -> Var<'t, S> {
        let bias = self.bias.map(|b| ctx.param(b));
        x.conv2d(ctx.param(self.weight), bias, self.kernel / 2, self.groups)
    }
}

/// Layer norm over the channel axis of an NCHW map with a per-channel affine.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

pub const NORM_EPS: f64 = 1e-5;

impl ChannelNorm {
    pub fn new<S: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, S, R>, channels: usize) -> Self {
        let gamma = pb.constant("gamma", &[channels], 1.0);
        let beta = pb.constant("beta", &[channels], 0.0);
        Self { gamma, beta, channels }
    }

    pub fn forward<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, x: Var<'t, S>) -> Var<'t, S> {
        let c = self.channels;
        let g = ctx.param(self.gamma).reshape(&[1, c, 1, 1]);
        let b = ctx.param(self.beta).reshape(&[1, c, 1, 1]);
        x.layer_norm_channels(lit(NORM_EPS)) * g + b
    }
}

/// Global average pool `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<'t, S: Scalar>(x: Var<'t, S>) -> Var<'t, S> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]]).mean_axis(2).reshape(&[s[0], s[1]])
}

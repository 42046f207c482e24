//! Small conditional diffusion model over the prior vector: schedule, forward
//! noising, the full reverse chain and the residual-MLP noise predictor.

use blindsr_tensor::{lit, Ctx, ParamBuilder, Scalar, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{DenoiserConfig, DiffusionConfig};
use crate::error::{Error, Result};
use crate::nn::{leaky, Linear};

/// Grid that `sigma_t` is snapped to; keeps `sigma^2`, `1 - sigma^2` and their
/// sum exact in binary floating point.
const SIGMA_GRID: f64 = (1u64 << 20) as f64;

/// Per-step `alpha_t`, `alpha_bar_t` and `sigma_t`, stored for `t = 1..=T` at
/// index `t - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl Schedule {
    /// Linear `beta` from `beta_start` to `beta_end`, `alpha_t = 1 - beta_t`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("diffusion.steps", "must be at least 1"));
        }
        for (name, b) in [("diffusion.beta_start", beta_start), ("diffusion.beta_end", beta_end)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(name, format!("must lie in (0, 1), got {b}")));
            }
        }
        let betas = (0..steps).map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        });
        Self::from_betas(betas)
    }

    pub fn from_config(cfg: &DiffusionConfig) -> Result<Self> {
        Self::linear(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn from_betas(betas: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut alpha = Vec::new();
        let mut sigma = Vec::new();
        for b in betas {
            let s = ((b.sqrt() * SIGMA_GRID).round() / SIGMA_GRID).clamp(1.0 / SIGMA_GRID, 1.0 - 1.0 / SIGMA_GRID);
            sigma.push(s);
            alpha.push(1.0 - s * s);
        }
        if alpha.is_empty() {
            return Err(Error::config("diffusion.steps", "must be at least 1"));
        }
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, &a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { alpha, alpha_bar, sigma })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    /// `alpha_t`, 1-based.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    /// `alpha_bar_T`.
    pub fn final_alpha_bar(&self) -> f64 {
        *self.alpha_bar.last().expect("non-empty schedule")
    }
}

/// `z_T = sqrt(abar_T) z0 + sqrt(1 - abar_T) eps`.
pub fn forward_diffuse<S: Scalar>(z0: &Tensor<S>, eps: &Tensor<S>, schedule: &Schedule) -> Result<Tensor<S>> {
    if z0.shape() != eps.shape() {
        return Err(Error::Shape(format!("forward_diffuse: z0 {:?} vs eps {:?}", z0.shape(), eps.shape())));
    }
    let ab = schedule.final_alpha_bar();
    let (a, b): (S, S) = (lit(ab.sqrt()), lit((1.0 - ab).sqrt()));
    Ok(z0.zip_with(eps, |z, e| a * z + b * e))
}

/// Graph version of [`forward_diffuse`].
pub fn forward_diffuse_var<'t, S: Scalar>(z0: Var<'t, S>, eps: Var<'t, S>, schedule: &Schedule) -> Var<'t, S> {
    let ab = schedule.final_alpha_bar();
    z0.mul_scalar(lit(ab.sqrt())) + eps.mul_scalar(lit((1.0 - ab).sqrt()))
}

/// Source of the `sigma_t * eps` term in the reverse chain.
pub enum ChainNoise<'r, R: Rng> {
    /// No stochastic term at any step.
    Deterministic,
    /// Standard normal draws for `t > 1`; nothing is drawn at `t = 1`.
    Sampled(&'r mut R),
}

/// Runs `t = T..1`:
/// `z_{t-1} = (z_t - (1 - a_t) / sqrt(1 - abar_t) * eps(z_t, t)) / sqrt(a_t) + sigma_t n`,
/// with the noise term dropped at `t = 1`.
pub fn reverse_chain<'t, S: Scalar, R: Rng>(
    z_t: Var<'t, S>,
    schedule: &Schedule,
    mut noise: ChainNoise<'_, R>,
    mut eps_fn: impl FnMut(Var<'t, S>, usize) -> Result<Var<'t, S>>,
) -> Result<Var<'t, S>> {
    let tape = z_t.tape();
    let shape = z_t.shape();
    let mut z = z_t;
    for t in (1..=schedule.steps()).rev() {
        let eps = eps_fn(z, t)?;
        let a = schedule.alpha(t);
        let coef = (1.0 - a) / (1.0 - schedule.alpha_bar(t)).sqrt();
        z = (z - eps.mul_scalar(lit(coef))).mul_scalar(lit(1.0 / a.sqrt()));
        if t > 1 {
            if let ChainNoise::Sampled(rng) = &mut noise {
                let sigma = schedule.sigma(t);
                let n = Tensor::from_fn(&shape, |_| lit(sigma * rng.sample::<f64, _>(StandardNormal)));
                z = z + tape.constant(n);
            }
        }
        if !z.value().is_finite() {
            return Err(Error::Numerical { stage: "reverse_chain", step: t });
        }
    }
    Ok(z)
}

/// Mean absolute difference between the teacher prior and its estimate.
pub fn diffusion_loss<'t, S: Scalar>(z0: Var<'t, S>, z0_hat: Var<'t, S>) -> Result<Var<'t, S>> {
    if z0.shape() != z0_hat.shape() {
        return Err(Error::Shape(format!("diffusion_loss: {:?} vs {:?}", z0.shape(), z0_hat.shape())));
    }
    Ok((z0 - z0_hat).abs().mean_all())
}

/// Sinusoidal embedding of step `t`: `[sin(t f_0..), cos(t f_0..)]` with
/// `f_i = 10000^(-i / (dim/2))`, repeated over `batch` rows.
pub fn time_embedding<S: Scalar>(t: usize, dim: usize, batch: usize) -> Tensor<S> {
    let half = dim / 2;
    let row: Vec<f64> = (0..dim)
        .map(|j| {
            let i = j % half;
            let arg = t as f64 * (-(10000f64.ln()) * i as f64 / half as f64).exp();
            if j < half {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect();
    Tensor::from_fn(&[batch, dim], |k| lit(row[k % dim]))
}

/// `eps_theta(z_t, t, c)`: input projection of `concat(z_t, c, temb)`, then
/// residual blocks that each re-read `c`, then an output projection.
#[derive(Clone, Debug)]
pub struct Denoiser {
    input: Linear,
    blocks: Vec<(Linear, Linear)>,
    output: Linear,
    time_dim: usize,
}

impl Denoiser {
    pub fn new<S: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, S, R>, cfg: &DenoiserConfig, cdp_dim: usize) -> Self {
        let input = Linear::new(&mut pb.sub("input"), 2 * cdp_dim + cfg.time_dim, cfg.hidden);
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let mut b = pb.sub(&format!("block{i}"));
                let l1 = Linear::new(&mut b.sub("fc1"), cfg.hidden + cdp_dim, cfg.hidden);
                let l2 = Linear::new(&mut b.sub("fc2"), cfg.hidden, cfg.hidden);
                (l1, l2)
            })
            .collect();
        let output = Linear::new(&mut pb.sub("output"), cfg.hidden, cdp_dim);
        Self { input, blocks, output, time_dim: cfg.time_dim }
    }

    /// `z_t, c: [N, C_z]` to predicted noise `[N, C_z]`.
    pub fn forward<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, z_t: Var<'t, S>, c: Var<'t, S>, t: usize) -> Var<'t, S> {
        let n = z_t.shape()[0];
        let temb = ctx.constant(time_embedding(t, self.time_dim, n));
        let mut h = self.input.forward(ctx, Var::concat(&[z_t, c, temb], 1));
        for (l1, l2) in &self.blocks {
            h = h + l2.forward(ctx, leaky(l1.forward(ctx, Var::concat(&[h, c], 1))));
        }
        self.output.forward(ctx, leaky(h))
    }
}

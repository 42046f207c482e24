//! The full system: both encoders, the denoiser and the SR network sharing one
//! parameter store. Parameter names start with their group: `egt`, `elr`,
//! `denoiser`, `sr`.

use std::collections::BTreeMap;

use blindsr_tensor::{Ctx, ParamBuilder, ParamStore, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::ModelConfig;
use crate::diffusion::{reverse_chain, ChainNoise, Denoiser, Schedule};
use crate::encoders::{GtEncoder, LrEncoder};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::transformer::SrNetwork;

pub const GROUP_EGT: &str = "egt";
pub const GROUP_ELR: &str = "elr";
pub const GROUP_DENOISER: &str = "denoiser";
pub const GROUP_SR: &str = "sr";

#[derive(Clone, Debug)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub egt: Option<GtEncoder>,
    pub elr: Option<LrEncoder>,
    pub denoiser: Option<Denoiser>,
    pub sr: SrNetwork,
}

impl<S: Scalar> Model<S> {
    /// Builds every component with seeded default initialisation.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut errs = Vec::new();
        config.validate(&mut errs);
        if !errs.is_empty() {
            return Err(Error::InvalidConfig(errs));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cz = config.cdp_dim;
        let (egt, elr, denoiser) = if config.prior.uses_prior() {
            let egt = GtEncoder::new(
                &mut ParamBuilder::new(&mut store, &mut rng, GROUP_EGT),
                config.scale,
                config.prior,
                &config.encoder,
                cz,
            );
            let elr = LrEncoder::new(&mut ParamBuilder::new(&mut store, &mut rng, GROUP_ELR), &config.encoder, cz);
            let den = Denoiser::new(&mut ParamBuilder::new(&mut store, &mut rng, GROUP_DENOISER), &config.denoiser, cz);
            (Some(egt), Some(elr), Some(den))
        } else {
            (None, None, None)
        };
        let sr = SrNetwork::new(&mut ParamBuilder::new(&mut store, &mut rng, GROUP_SR), config)?;
        Ok(Self { config: config.clone(), store, egt, elr, denoiser, sr })
    }

    pub fn uses_prior(&self) -> bool {
        self.config.prior.uses_prior()
    }

    pub fn scale(&self) -> usize {
        self.config.scale
    }

    /// Parameter counts per group.
    pub fn group_sizes(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (id, p) in self.store.iter() {
            *out.entry(self.store.group_of(id).to_string()).or_insert(0) += p.value.len();
        }
        out
    }

    /// Parameters used at inference time (`E_LR`, denoiser, SR network).
    pub fn inference_param_count(&self) -> usize {
        self.store.count() - self.store.count_with_prefix(&format!("{GROUP_EGT}."))
    }

    fn missing(what: &str) -> Error {
        Error::MissingComponent(format!("{what} (model built without a prior)"))
    }

    /// `Z0 = E_GT(hr, lr)`.
    pub fn encode_gt<'t>(&self, ctx: &Ctx<'t, S>, hr: Var<'t, S>, lr: Var<'t, S>) -> Result<Var<'t, S>> {
        self.egt.as_ref().ok_or_else(|| Self::missing("E_GT"))?.forward(ctx, hr, lr)
    }

    /// `c = E_LR(lr)`.
    pub fn encode_lr<'t>(&self, ctx: &Ctx<'t, S>, lr: Var<'t, S>) -> Result<Var<'t, S>> {
        Ok(self.elr.as_ref().ok_or_else(|| Self::missing("E_LR"))?.forward(ctx, lr))
    }

    /// Full reverse chain from `z_t` conditioned on `c`.
    pub fn estimate_prior<'t>(
        &self,
        ctx: &Ctx<'t, S>,
        z_t: Var<'t, S>,
        c: Var<'t, S>,
        schedule: &Schedule,
        noise: ChainNoise<'_, ChaCha8Rng>,
    ) -> Result<Var<'t, S>> {
        let den = self.denoiser.as_ref().ok_or_else(|| Self::missing("denoiser"))?;
        reverse_chain(z_t, schedule, noise, |z, t| Ok(den.forward(ctx, z, c, t)))
    }

    pub fn super_resolve<'t>(&self, ctx: &Ctx<'t, S>, lr: Var<'t, S>, z: Option<Var<'t, S>>) -> Result<Var<'t, S>> {
        self.sr.forward(ctx, lr, z)
    }

    /// Samples the prior from LR alone: `z_T ~ N(0, I)` then the reverse chain,
    /// all noise drawn from one stream seeded by `seed`. `lr: [N, 3, H, W]`.
    pub fn sample_prior(&self, lr: &Tensor<S>, schedule: &Schedule, seed: u64) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &self.store);
        let z = self.sample_prior_var(&ctx, ctx.constant(lr.clone()), schedule, seed)?;
        let out = z.value();
        Ok((*out).clone())
    }

    pub fn sample_prior_var<'t>(
        &self,
        ctx: &Ctx<'t, S>,
        lr: Var<'t, S>,
        schedule: &Schedule,
        seed: u64,
    ) -> Result<Var<'t, S>> {
        let c = self.encode_lr(ctx, lr)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = lr.shape()[0];
        let z_t = Tensor::from_fn(&[n, self.config.cdp_dim], |_| {
            S::from_f64_lossy(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        });
        self.estimate_prior(ctx, ctx.constant(z_t), c, schedule, ChainNoise::Sampled(&mut rng))
    }

    /// LR image to SR image; the prior (if any) is sampled with `seed`.
    pub fn infer(&self, lr: &Image<S>, schedule: &Schedule, seed: u64) -> Result<Image<S>> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &self.store);
        let x = ctx.constant(lr.to_tensor());
        let z = if self.uses_prior() { Some(self.sample_prior_var(&ctx, x, schedule, seed)?) } else { None };
        let sr = self.super_resolve(&ctx, x, z)?.value();
        let mut out = Image::unbatch(&sr)?;
        Ok(out.remove(0).clamp01())
    }

    /// SR with an explicitly supplied prior (used by ablation wiring checks).
    pub fn infer_with_prior(&self, lr: &Image<S>, z: Option<&Tensor<S>>) -> Result<Image<S>> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &self.store);
        let z = z.map(|t| ctx.constant(t.clone()));
        let sr = self.super_resolve(&ctx, ctx.constant(lr.to_tensor()), z)?.value();
        Ok(Image::unbatch(&sr)?.remove(0).clamp01())
    }

    /// Teacher prior `E_GT(hr, lr)` for one pair.
    pub fn teacher_prior(&self, hr: &Image<S>, lr: &Image<S>) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &self.store);
        let z = self.encode_gt(&ctx, ctx.constant(hr.to_tensor()), ctx.constant(lr.to_tensor()))?;
        let out = z.value();
        Ok((*out).clone())
    }

    /// Same architecture and values at another precision.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            egt: self.egt.clone(),
            elr: self.elr.clone(),
            denoiser: self.denoiser.clone(),
            sr: self.sr.clone(),
        }
    }
}

//! Two-stage optimisation.
//!
//! Stage 1 trains `E_GT` and the SR network on the reconstruction loss.
//! Stage 2 keeps `E_GT` as a frozen teacher and trains `E_LR`, the denoiser and
//! the SR network on `L_diff + alpha_rec * L_rec`, running the whole reverse
//! chain every step.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use blindsr_tensor::{clip_global_norm, lit, Adam, AdamConfig, Ctx, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{epoch_order, make_batch, Batch, HrSet};
use crate::degradation::sample_spec;
use crate::diffusion::{diffusion_loss, forward_diffuse_var, ChainNoise, Schedule};
use crate::error::{Error, Result};
use crate::model::{Model, GROUP_DENOISER, GROUP_EGT, GROUP_ELR, GROUP_SR};
use crate::seed::{derive_indexed, derive_seed};

/// `lr0 * 2^-floor(epoch / period)`.
pub fn lr_schedule(lr0: f64, period: usize, epoch: usize) -> f64 {
    lr0 * 0.5f64.powi((epoch / period.max(1)) as i32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            other => Err(Error::config("stage", format!("must be 1 or 2, got {other}"))),
        }
    }
}

/// Mean absolute error between two equally shaped tensors.
pub fn reconstruction_loss<'t, S: Scalar>(sr: Var<'t, S>, hr: Var<'t, S>) -> Result<Var<'t, S>> {
    if sr.shape() != hr.shape() {
        return Err(Error::Shape(format!("reconstruction loss: SR {:?} vs HR {:?}", sr.shape(), hr.shape())));
    }
    Ok((sr - hr).abs().mean_all())
}

/// Graph nodes of one objective evaluation.
pub struct Objective<'t, S: Scalar> {
    pub total: Var<'t, S>,
    pub l_rec: Var<'t, S>,
    pub l_diff: Option<Var<'t, S>>,
    pub sr: Var<'t, S>,
}

/// Stage-1 objective: `L_rec(SR(lr, E_GT(hr, lr)), hr)`.
pub fn stage1_objective<'t, S: Scalar>(
    model: &Model<S>,
    ctx: &Ctx<'t, S>,
    hr: Var<'t, S>,
    lr: Var<'t, S>,
) -> Result<Objective<'t, S>> {
    let z = if model.uses_prior() { Some(model.encode_gt(ctx, hr, lr)?) } else { None };
    let sr = model.super_resolve(ctx, lr, z)?;
    let l_rec = reconstruction_loss(sr, hr)?;
    Ok(Objective { total: l_rec, l_rec, l_diff: None, sr })
}

/// Stage-2 objective. `z_T` is the forward-diffused teacher prior; the
/// estimate comes from the full reverse chain conditioned on `E_LR(lr)`.
/// Draws the forward noise and then the chain noise from `rng`.
pub fn stage2_objective<'t, S: Scalar>(
    model: &Model<S>,
    ctx: &Ctx<'t, S>,
    hr: Var<'t, S>,
    lr: Var<'t, S>,
    schedule: &Schedule,
    alpha_rec: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Objective<'t, S>> {
    let z0 = model.encode_gt(ctx, hr, lr)?;
    let eps = Tensor::from_fn(&z0.shape(), |_| {
        S::from_f64_lossy(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
    });
    let z_t = forward_diffuse_var(z0, ctx.constant(eps), schedule);
    let c = model.encode_lr(ctx, lr)?;
    let z_hat = model.estimate_prior(ctx, z_t, c, schedule, ChainNoise::Sampled(rng))?;
    let sr = model.super_resolve(ctx, lr, Some(z_hat))?;
    let l_rec = reconstruction_loss(sr, hr)?;
    let l_diff = diffusion_loss(z0, z_hat)?;
    let total = l_diff + l_rec.mul_scalar(lit(alpha_rec));
    Ok(Objective { total, l_rec, l_diff: Some(l_diff), sr })
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState<S: Scalar> {
    pub run: RunConfig,
    pub model: Model<S>,
    pub optimizer: Adam<S>,
    pub stage: Stage,
    /// Next epoch to run (number of completed epochs in this stage).
    pub epoch: usize,
    /// Optimizer steps taken in this stage.
    pub step: u64,
    /// Parameter groups that have been trained so far.
    pub trained: Vec<String>,
}

fn adam_config(run: &RunConfig) -> AdamConfig {
    AdamConfig { beta1: run.train.adam_betas[0], beta2: run.train.adam_betas[1], ..AdamConfig::default() }
}

impl<S: Scalar> TrainState<S> {
    /// Freshly initialised stage-1 state.
    pub fn new(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        let model = Model::new(&run.model, derive_seed(run.train.seed, "init"))?;
        let optimizer = Adam::new(adam_config(run), &model.store);
        Ok(Self { run: run.clone(), model, optimizer, stage: Stage::One, epoch: 0, step: 0, trained: Vec::new() })
    }

    /// Moves a stage-1 state into stage 2: fresh optimizer, counters reset.
    /// `run` may change training knobs but not the architecture.
    pub fn into_stage2(self, run: &RunConfig) -> Result<Self> {
        run.validate()?;
        if self.stage != Stage::One {
            return Err(Error::config("stage", "stage 2 must start from a stage-1 checkpoint"));
        }
        if !self.model.uses_prior() {
            return Err(Error::config("stage", "a model without a prior has no second stage"));
        }
        if !self.trained.iter().any(|g| g == GROUP_EGT) {
            return Err(Error::MissingComponent("stage 2 needs a trained E_GT from stage 1".into()));
        }
        if run.model.arch_hash() != self.run.model.arch_hash() {
            return Err(Error::Checkpoint("stage-2 config describes a different architecture".into()));
        }
        let optimizer = Adam::new(adam_config(run), &self.model.store);
        Ok(Self { run: run.clone(), optimizer, stage: Stage::Two, epoch: 0, step: 0, ..self })
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::from_config(&self.run.diffusion)
    }

    pub fn current_lr(&self) -> f64 {
        lr_schedule(self.run.train.lr, self.run.train.lr_halving_period, self.epoch)
    }

    fn groups_updated(&self) -> Vec<&'static str> {
        match self.stage {
            Stage::One if self.model.uses_prior() => vec![GROUP_EGT, GROUP_SR],
            Stage::One => vec![GROUP_SR],
            Stage::Two if self.run.train.freeze_gt_encoder => vec![GROUP_ELR, GROUP_DENOISER, GROUP_SR],
            Stage::Two => vec![GROUP_EGT, GROUP_ELR, GROUP_DENOISER, GROUP_SR],
        }
    }

    /// Errors unless every component needed for LR-only inference has been
    /// trained.
    pub fn ensure_inference_ready(&self) -> Result<()> {
        let needed: &[&str] =
            if self.model.uses_prior() { &[GROUP_ELR, GROUP_DENOISER, GROUP_SR] } else { &[GROUP_SR] };
        let missing: Vec<&str> = needed.iter().copied().filter(|g| !self.trained.iter().any(|t| t == g)).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingComponent(format!(
                "checkpoint lacks trained {} (run stage 2 first)",
                missing.join(", ")
            )))
        }
    }
}

/// Scalar losses of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub l_rec: f64,
    pub l_diff: Option<f64>,
    pub total: f64,
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub epoch: usize,
    pub step: u64,
    pub l_rec: f64,
    pub l_diff: Option<f64>,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_secs: f64,
}

fn build_objective<'t, S: Scalar>(
    state: &TrainState<S>,
    ctx: &Ctx<'t, S>,
    batch: &Batch<S>,
    schedule: &Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<Objective<'t, S>> {
    let hr = ctx.constant(batch.hr.clone());
    let lr = ctx.constant(batch.lr.clone());
    match state.stage {
        Stage::One => stage1_objective(&state.model, ctx, hr, lr),
        Stage::Two => stage2_objective(&state.model, ctx, hr, lr, schedule, state.run.train.alpha_rec, rng),
    }
}

fn values<S: Scalar>(obj: &Objective<'_, S>) -> LossValues {
    LossValues {
        l_rec: obj.l_rec.value().item().as_f64(),
        l_diff: obj.l_diff.map(|v| v.value().item().as_f64()),
        total: obj.total.value().item().as_f64(),
    }
}

/// Losses of the current parameters on `batch`; stochastic terms are drawn
/// from `seed`.
pub fn evaluate_losses<S: Scalar>(state: &TrainState<S>, batch: &Batch<S>, seed: u64) -> Result<LossValues> {
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &state.model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obj = build_objective(state, &ctx, batch, &state.schedule()?, &mut rng)?;
    Ok(values(&obj))
}

/// One optimizer step on `batch` at `lr`. Returns the pre-update losses and
/// the pre-clip gradient norm.
pub fn train_step<S: Scalar>(state: &mut TrainState<S>, batch: &Batch<S>, lr: f64, seed: u64) -> Result<(LossValues, f64)> {
    let schedule = state.schedule()?;
    let (loss, mut grads) = {
        let tape = Tape::new();
        let mut ctx = Ctx::train(&tape, &state.model.store);
        if state.stage == Stage::Two && state.run.train.freeze_gt_encoder {
            ctx = ctx.freeze_group(GROUP_EGT);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obj = build_objective(state, &ctx, batch, &schedule, &mut rng)?;
        let loss = values(&obj);
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss { step: state.step, lr, batch: batch.indices.clone() });
        }
        let grads = ctx.param_grads(tape.backward(obj.total));
        (loss, grads)
    };
    let norm = if state.run.train.grad_clip > 0.0 {
        clip_global_norm(&mut grads, state.run.train.grad_clip)
    } else {
        clip_global_norm(&mut grads, f64::INFINITY)
    };
    state.optimizer.step(&mut state.model.store, &grads, lr);
    state.step += 1;
    for g in state.groups_updated() {
        if !state.trained.iter().any(|t| t == g) {
            state.trained.push(g.to_string());
        }
    }
    state.trained.sort();
    Ok((loss, norm))
}

fn stage_label(stage: Stage, what: &str) -> String {
    format!("stage{}.{what}", stage.number())
}

/// The batch for global step `step` of epoch `epoch`; a pure function of the
/// run seed, so resumed runs see the same data.
pub fn batch_for_step<S: Scalar>(
    state: &TrainState<S>,
    data: &HrSet<S>,
    epoch: usize,
    slot: usize,
    step: u64,
) -> Result<Batch<S>> {
    let t = &state.run.train;
    let steps = steps_per_epoch(state, data);
    let bs = t.batch_size;
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_indexed(t.seed, &stage_label(state.stage, "order"), epoch as u64));
    let order = epoch_order(data.len(), steps * bs, &mut order_rng);
    let indices = &order[slot * bs..(slot + 1) * bs];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(t.seed, &stage_label(state.stage, "batch"), step));
    let spec = sample_spec(&t.degradation, state.run.model.scale, &mut rng);
    make_batch(data, indices, t.patch_size * state.run.model.scale, &spec, &mut rng)
}

/// The configured training images: PNGs from `hr_dir`, or `synthetic_count`
/// procedural images of exactly one HR patch each.
pub fn training_set<S: Scalar>(run: &RunConfig) -> Result<HrSet<S>> {
    match &run.train.hr_dir {
        Some(dir) => HrSet::from_dir(dir),
        None => {
            let side = run.train.patch_size * run.model.scale;
            Ok(HrSet::synthetic(derive_seed(run.train.seed, "data"), run.train.synthetic_count, side, side))
        }
    }
}

pub fn steps_per_epoch<S: Scalar>(state: &TrainState<S>, data: &HrSet<S>) -> usize {
    let t = &state.run.train;
    t.steps_per_epoch.unwrap_or_else(|| data.len().div_ceil(t.batch_size))
}

/// Trains from `state.epoch` up to (excluding) `until_epoch`, calling
/// `on_step` after every step. Stops early if `on_step` returns an error.
pub fn train_until<S: Scalar>(
    state: &mut TrainState<S>,
    data: &HrSet<S>,
    until_epoch: usize,
    mut on_step: impl FnMut(&TrainState<S>, &StepRecord) -> Result<()>,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let start = Instant::now();
    let steps = steps_per_epoch(state, data);
    while state.epoch < until_epoch {
        let lr = state.current_lr();
        for slot in 0..steps {
            let step = state.step;
            let batch = batch_for_step(state, data, state.epoch, slot, step)?;
            let seed = derive_indexed(state.run.train.seed, &stage_label(state.stage, "noise"), step);
            let (loss, grad_norm) = train_step(state, &batch, lr, seed)?;
            let rec = StepRecord {
                stage: state.stage.number(),
                epoch: state.epoch,
                step,
                l_rec: loss.l_rec,
                l_diff: loss.l_diff,
                total: loss.total,
                lr,
                grad_norm,
                wall_secs: start.elapsed().as_secs_f64(),
            };
            on_step(state, &rec)?;
        }
        state.epoch += 1;
    }
    Ok(())
}

/// Runs every remaining epoch of the configured stage.
pub fn train<S: Scalar>(
    state: &mut TrainState<S>,
    data: &HrSet<S>,
    on_step: impl FnMut(&TrainState<S>, &StepRecord) -> Result<()>,
) -> Result<()> {
    let epochs = state.run.train.epochs;
    train_until(state, data, epochs, on_step)
}

pub const LOG_HEADER: &str = "stage,epoch,step,l_rec,l_diff,total,lr,grad_norm,wall_secs";

/// Append-only CSV training log.
pub struct TrainLog {
    file: std::fs::File,
    path: std::path::PathBuf,
}

impl TrainLog {
    /// Opens `path` for appending, writing the header if the file is new.
    pub fn open(path: &Path) -> Result<Self> {
        let exists = path.exists() && std::fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
        let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        if !exists {
            writeln!(file, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { file, path: path.to_path_buf() })
    }

    pub fn append(&mut self, r: &StepRecord) -> Result<()> {
        let l_diff = r.l_diff.map(|v| format!("{v:.8}")).unwrap_or_default();
        writeln!(
            self.file,
            "{},{},{},{:.8},{},{:.8},{:e},{:.6},{:.3}",
            r.stage, r.epoch, r.step, r.l_rec, l_diff, r.total, r.lr, r.grad_norm, r.wall_secs
        )
        .map_err(|e| Error::io(&self.path, e))
    }
}

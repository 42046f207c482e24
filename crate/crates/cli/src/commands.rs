use std::path::{Path, PathBuf};
use std::time::Instant;

use blindsr_core::checkpoint;
use blindsr_core::config::RunConfig;
use blindsr_core::data::{list_pngs, HrSet};
use blindsr_core::degradation::{degrade, make_protocol_grid, sample_spec, DegradationSpec, Protocol, ProtocolFile};
use blindsr_core::imaging::Image;
use blindsr_core::metrics::{
    bicubic_method, copy_hr_method, model_method, run_ablation, run_benchmark, MetricSpace, ReportMeta,
};
use blindsr_core::seed::{derive_indexed, derive_seed};
use blindsr_core::training::{steps_per_epoch, train_until, training_set, StepRecord, TrainLog, TrainState};
use blindsr_core::{Error, TrainState32};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::args::{AblateArgs, Command, EvalArgs, InferArgs, SynthArgs, TrainArgs};
use crate::failure::{Failure, Outcome};
use crate::manifest::{config_hash, Invocation, RunManifest, GIT_REV};

pub const SIDECAR_FILE: &str = "degradations.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "train_log.csv";

/// Runs one invocation, bracketing it with manifest writes.
pub fn execute(inv: &Invocation) -> Outcome<()> {
    let mut manifest = RunManifest::new(inv);
    let result = match &inv.command {
        Command::Synth(a) => synth(inv, a, &mut manifest),
        Command::Train(a) => train(inv, a, &mut manifest),
        Command::Infer(a) => infer(inv, a, &mut manifest),
        Command::Eval(a) => eval(inv, a, &mut manifest),
        Command::Ablate(a) => ablate(inv, a, &mut manifest),
        Command::Replay(_) => Err(Failure::usage("a manifest cannot describe a replay")),
    };
    if manifest.begun() {
        let status = match &result {
            Ok(()) => "ok".to_string(),
            Err(f) => format!("failed: {}", f.message),
        };
        manifest.finish(&status)?;
    }
    result
}

fn with_seed(mut run: RunConfig, seed: Option<u64>) -> RunConfig {
    if let Some(s) = seed {
        run.train.seed = s;
    }
    run
}

fn require_config(inv: &Invocation) -> Outcome<RunConfig> {
    inv.config
        .clone()
        .map(|c| with_seed(c, inv.seed))
        .ok_or_else(|| Failure::usage(format!("{} needs a run config: pass --config FILE or --preset NAME", inv.command.name())))
}

fn load_checkpoint(path: &Path, expected: Option<&RunConfig>) -> Outcome<TrainState32> {
    if !path.is_file() {
        return Err(Failure::usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(match expected {
        Some(run) => checkpoint::load_expecting(path, run)?,
        None => checkpoint::load(path)?,
    })
}

fn write_file(path: &Path, contents: &str) -> Outcome<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn create_dir(path: &Path) -> Outcome<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

/// One LR image written by `synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub name: String,
    /// HR source, absolute or relative to the output directory.
    pub hr: PathBuf,
    /// LR file relative to the output directory.
    pub lr: PathBuf,
    /// HR size actually degraded (cropped to a multiple of the scale).
    pub hr_size: [usize; 2],
    pub spec: DegradationSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub scale: usize,
    pub seed: u64,
    pub entries: Vec<SidecarEntry>,
}

fn synth(inv: &Invocation, a: &SynthArgs, m: &mut RunManifest) -> Outcome<()> {
    let run = require_config(inv)?;
    let scale = a.scale.unwrap_or(run.model.scale);
    if scale == 0 {
        return Err(Failure::usage("--scale must be positive"));
    }
    let seed = run.train.seed;
    let fixed = a.width.map(|w| DegradationSpec::isotropic(w, scale).with_noise(a.noise.unwrap_or(0.0)));
    if let Some(spec) = &fixed {
        spec.validate()?;
    }
    let (set, write_hr) = match (&a.hr_dir, a.synthetic) {
        (Some(dir), _) => {
            if !dir.is_dir() {
                return Err(Failure::usage(format!("--hr-dir {} is not a directory", dir.display())));
            }
            (HrSet::<f32>::from_dir(dir)?, false)
        }
        (None, Some(0)) => return Err(Failure::usage("--synthetic must be positive")),
        (None, Some(n)) => {
            let side = a.size.unwrap_or(run.train.patch_size * scale);
            (HrSet::synthetic(derive_seed(seed, "synth.data"), n, side, side), true)
        }
        (None, None) => return Err(Failure::usage("synth needs --hr-dir DIR or --synthetic N")),
    };

    m.begin(Some(&run), seed)?;
    let out = &inv.out;
    create_dir(&out.join("lr"))?;
    if write_hr {
        create_dir(&out.join("hr"))?;
    }
    let mut entries = Vec::with_capacity(set.len());
    for (i, (name, img)) in set.names.iter().zip(&set.images).enumerate() {
        let hr = img.quantize_u8().crop_to_multiple(scale)?;
        let spec = match &fixed {
            Some(spec) => spec.clone().with_seed(derive_indexed(seed, "synth.noise", i as u64)),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(seed, "synth.spec", i as u64));
                sample_spec(&run.train.degradation, scale, &mut rng)
            }
        };
        let lr = degrade(&hr, &spec)?;
        let hr_path = if write_hr {
            let rel = PathBuf::from("hr").join(format!("{name}.png"));
            hr.save_png(&out.join(&rel))?;
            rel
        } else {
            a.hr_dir.as_ref().map(|d| d.join(format!("{name}.png"))).unwrap_or_default()
        };
        let lr_path = PathBuf::from("lr").join(format!("{name}.png"));
        lr.save_png(&out.join(&lr_path))?;
        entries.push(SidecarEntry { name: name.clone(), hr: hr_path, lr: lr_path, hr_size: [hr.height(), hr.width()], spec });
    }
    let sidecar = Sidecar { scale, seed, entries };
    let json = serde_json::to_string_pretty(&sidecar).map_err(Error::from)?;
    write_file(&out.join(SIDECAR_FILE), &(json + "\n"))?;
    if !set.skipped.is_empty() {
        log::warn!("skipped {} unreadable file(s)", set.skipped.len());
    }
    log::info!("wrote {} LR images (x{scale}) to {}", sidecar.entries.len(), out.join("lr").display());
    Ok(())
}

fn apply_train_overrides(run: &mut RunConfig, a: &TrainArgs) {
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    if let Some(d) = &a.hr_dir {
        run.train.hr_dir = Some(d.clone());
    }
}

fn train_state(inv: &Invocation, a: &TrainArgs) -> Outcome<TrainState32> {
    let explicit = inv.config.clone().map(|c| with_seed(c, inv.seed));
    if let Some(path) = &a.resume {
        let mut state = load_checkpoint(path, explicit.as_ref())?;
        if let Some(stage) = a.stage {
            if stage != state.stage.number() {
                return Err(Failure::usage(format!(
                    "--stage {stage} does not match the resumed checkpoint (stage {})",
                    state.stage.number()
                )));
            }
        }
        if let Some(s) = inv.seed {
            state.run.train.seed = s;
        }
        apply_train_overrides(&mut state.run, a);
        state.run.validate()?;
        return Ok(state);
    }
    match a.stage.unwrap_or(1) {
        2 => {
            let init = a
                .init_from
                .as_ref()
                .ok_or_else(|| Failure::usage("--stage 2 requires --init-from <stage-1 checkpoint>"))?;
            let base = load_checkpoint(init, explicit.as_ref())?;
            let mut run = explicit.unwrap_or_else(|| with_seed(base.run.clone(), inv.seed));
            apply_train_overrides(&mut run, a);
            Ok(base.into_stage2(&run)?)
        }
        _ => {
            if a.init_from.is_some() {
                return Err(Failure::usage("--init-from only applies to --stage 2 (use --resume to continue stage 1)"));
            }
            let mut run = require_config(inv)?;
            apply_train_overrides(&mut run, a);
            Ok(TrainState::new(&run)?)
        }
    }
}

fn train(inv: &Invocation, a: &TrainArgs, m: &mut RunManifest) -> Outcome<()> {
    let mut state = train_state(inv, a)?;
    let every = a.checkpoint_every.unwrap_or(0);
    m.begin(Some(&state.run), state.run.train.seed)?;

    let data = training_set::<f32>(&state.run)?;
    let out = &inv.out;
    let mut log = TrainLog::open(&out.join(LOG_FILE))?;
    let target = state.run.train.epochs;
    let stage = state.stage.number();
    let per_epoch = steps_per_epoch(&state, &data);
    let remaining = target.saturating_sub(state.epoch) * per_epoch;
    let report_every = (remaining / 20).max(1) as u64;
    let first_step = state.step;
    log::info!(
        "stage {stage}: {} images, epochs {}..{target}, {per_epoch} step(s) per epoch, from step {first_step}",
        data.len(),
        state.epoch
    );
    let start = Instant::now();
    while state.epoch < target {
        let until = state.epoch + 1;
        train_until(&mut state, &data, until, |_, rec| {
            let rec = StepRecord { wall_secs: start.elapsed().as_secs_f64(), ..rec.clone() };
            log.append(&rec)?;
            if (rec.step - first_step + 1) % report_every == 0 {
                let diff = rec.l_diff.map(|d| format!(" l_diff {d:.5}")).unwrap_or_default();
                log::info!("epoch {} step {} l_rec {:.5}{diff} lr {:.2e} ({:.0}s)", rec.epoch, rec.step, rec.l_rec, rec.lr, rec.wall_secs);
            }
            Ok(())
        })?;
        if every > 0 && state.epoch % every == 0 && state.epoch < target {
            let path = out.join(format!("stage{stage}_e{:05}.ckpt", state.epoch));
            checkpoint::save(&state, &path)?;
        }
    }
    checkpoint::save(&state, &out.join(CHECKPOINT_FILE))?;
    log::info!("stage {stage} done at epoch {} step {} -> {}", state.epoch, state.step, out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn infer(inv: &Invocation, a: &InferArgs, m: &mut RunManifest) -> Outcome<()> {
    let explicit = inv.config.clone().map(|c| with_seed(c, inv.seed));
    let state = load_checkpoint(&a.checkpoint, explicit.as_ref())?;
    state.ensure_inference_ready()?;
    let seed = inv.seed.unwrap_or(state.run.train.seed);
    let inputs = if a.input.is_dir() {
        if same_dir(&a.input, &inv.out) {
            return Err(Failure::usage("--out must differ from the input directory"));
        }
        list_pngs(&a.input)?
    } else if a.input.is_file() {
        vec![a.input.clone()]
    } else {
        return Err(Failure::usage(format!("input {} does not exist", a.input.display())));
    };
    if inputs.is_empty() {
        return Err(Failure::runtime(format!("no PNG files in {}", a.input.display())));
    }

    m.begin(Some(&state.run), seed)?;
    let schedule = state.schedule()?;
    let mut written = 0;
    for path in &inputs {
        let lr = match Image::<f32>::load_png(path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {e}");
                continue;
            }
        };
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let sr = state.model.infer(&lr, &schedule, derive_seed(seed, &format!("infer/{stem}")))?;
        let file = path.file_name().map(PathBuf::from).unwrap_or_else(|| PathBuf::from(format!("{stem}.png")));
        sr.save_png(&inv.out.join(file))?;
        written += 1;
    }
    if written == 0 {
        return Err(Failure::runtime(format!("all {} input(s) failed to load", inputs.len())));
    }
    log::info!("wrote {written} of {} image(s) to {}", inputs.len(), inv.out.display());
    Ok(())
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn eval_set(run: &RunConfig, hr_dir: Option<&PathBuf>) -> Outcome<HrSet<f32>> {
    Ok(match hr_dir {
        Some(dir) => HrSet::from_dir(dir)?,
        None => training_set(run)?,
    })
}

fn eval(inv: &Invocation, a: &EvalArgs, m: &mut RunManifest) -> Outcome<()> {
    let space: MetricSpace = a.metric_space.parse()?;
    let protocol: Protocol = a.protocol.parse()?;
    let explicit = inv.config.clone().map(|c| with_seed(c, inv.seed));
    let state = match &a.checkpoint {
        Some(path) => {
            let s = load_checkpoint(path, explicit.as_ref())?;
            s.ensure_inference_ready()?;
            Some(s)
        }
        None => None,
    };
    let run = match (&explicit, &state) {
        (Some(run), _) => run.clone(),
        (None, Some(s)) => with_seed(s.run.clone(), inv.seed),
        (None, None) => require_config(inv)?,
    };
    let scale = run.model.scale;
    let specs = match &a.protocol_file {
        Some(file) => ProtocolFile::load(file)?.grid(protocol, scale)?,
        None => make_protocol_grid(protocol, scale)?,
    };
    let seed = run.train.seed;

    m.begin(Some(&run), seed)?;
    let set = eval_set(&run, a.hr_dir.as_ref())?;
    let model_id = match &state {
        Some(s) => format!("{}-{}", s.run.model.prior.ablation_name(), s.run.model.arch_hash()),
        None if a.copy_hr_oracle => "copy_hr_oracle".into(),
        None => "bicubic".into(),
    };
    let meta = ReportMeta { model_id, protocol: protocol.id().into(), config_hash: config_hash(&run), git_rev: GIT_REV.into() };
    let report = match &state {
        Some(s) => {
            let schedule = s.schedule()?;
            run_benchmark(&set, &specs, space, meta, model_method(&s.model, &schedule, derive_seed(seed, "eval")))?
        }
        None if a.copy_hr_oracle => run_benchmark(&set, &specs, space, meta, copy_hr_method)?,
        None => run_benchmark(&set, &specs, space, meta, bicubic_method)?,
    };
    write_file(&inv.out.join("report.csv"), &report.to_csv())?;
    write_file(&inv.out.join("report.json"), &(report.to_json()? + "\n"))?;
    print!("{}", report.summary_table());
    if report.skipped > 0 {
        log::warn!("{} unreadable image(s) skipped", report.skipped);
    }
    Ok(())
}

fn ablate(inv: &Invocation, a: &AblateArgs, m: &mut RunManifest) -> Outcome<()> {
    if a.checkpoints.len() != 4 {
        return Err(Failure::usage(format!(
            "ablate requires exactly 4 --checkpoint values (model1..model4), got {}",
            a.checkpoints.len()
        )));
    }
    let space: MetricSpace = a.metric_space.parse()?;
    let mut states = Vec::with_capacity(4);
    for path in &a.checkpoints {
        let s = load_checkpoint(path, None)?;
        s.ensure_inference_ready().map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
        states.push(s);
    }
    let run = match &inv.config {
        Some(c) => with_seed(c.clone(), inv.seed),
        None => with_seed(states[0].run.clone(), inv.seed),
    };
    let seed = run.train.seed;

    m.begin(Some(&run), seed)?;
    let set = eval_set(&run, a.hr_dir.as_ref())?;
    let schedule = states[0].schedule()?;
    let models: Vec<_> = states.iter().map(|s| &s.model).collect();
    let report = run_ablation(&models, &set, &schedule, space, derive_seed(seed, "ablate"), GIT_REV)?;
    write_file(&inv.out.join("ablation.csv"), &report.to_csv())?;
    write_file(&inv.out.join("ablation.json"), &(report.to_json()? + "\n"))?;
    print!("{}", report.to_csv());
    log::info!(
        "ordering model4 >= max(model2, model3) >= model1: {} (indicative)",
        if report.ordering_holds { "holds" } else { "does not hold" }
    );
    if !report.model1_prior_invariant {
        return Err(Failure::runtime("model1 output changed with the prior vector"));
    }
    Ok(())
}

//! PSNR / SSIM and the benchmark and ablation runners built on them.

use std::fmt::Write as _;

use blindsr_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::PriorMode;
use crate::data::HrSet;
use crate::degradation::{degrade, DegradationSpec, KernelSpec};
use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::model::Model;

/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Kernel widths of the ablation table.
pub const ABLATION_WIDTHS: [f64; 2] = [1.2, 2.4];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSpace {
    /// BT.601 luma only.
    #[default]
    Y,
    Rgb,
}

impl std::str::FromStr for MetricSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "y" => Ok(MetricSpace::Y),
            "rgb" => Ok(MetricSpace::Rgb),
            other => Err(Error::config("metric_space", format!("unknown metric space {other:?} (y|rgb)"))),
        }
    }
}

impl MetricSpace {
    pub fn id(self) -> &'static str {
        match self {
            MetricSpace::Y => "y",
            MetricSpace::Rgb => "rgb",
        }
    }
}

/// Planes (row-major, f64) to be scored after cropping `border` pixels.
fn planes<S: Scalar>(a: &Image<S>, b: &Image<S>, border: usize, space: MetricSpace) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, usize, usize)> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("metric inputs differ in size: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let (h, w) = a.dims();
    if 2 * border >= h || 2 * border >= w {
        return Err(Error::Shape(format!("border {border} leaves nothing of a {h}x{w} image")));
    }
    let (ch, cw) = (h - 2 * border, w - 2 * border);
    let crop = |p: &[S]| -> Vec<f64> {
        (border..h - border).flat_map(|y| p[y * w + border..y * w + w - border].iter().map(|v| v.as_f64())).collect()
    };
    let get = |img: &Image<S>| -> Vec<Vec<f64>> {
        match space {
            MetricSpace::Y => vec![crop(&img.luma())],
            MetricSpace::Rgb => (0..3).map(|c| crop(img.plane(c))).collect(),
        }
    };
    Ok((get(a), get(b), ch, cw))
}

/// `10 log10(1 / MSE)` on `[0,1]` data, capped at [`PSNR_CAP`].
pub fn psnr<S: Scalar>(a: &Image<S>, b: &Image<S>, border: usize, space: MetricSpace) -> Result<f64> {
    let (pa, pb, _, _) = planes(a, b, border, space)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (x, y) in pa.iter().zip(&pb) {
        sum += x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
        n += x.len();
    }
    Ok(psnr_from_mse(sum / n as f64))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable "valid" Gaussian filtering of an `h x w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_window();
    let f = |p: &[f64]| filter_valid(p, h, w, &g);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
    let (mu_a, mu_b) = (f(a), f(b));
    let (e_aa, e_bb, e_ab) = (f(&prod(a, a)), f(&prod(b, b)), f(&prod(a, b)));
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    total / n as f64
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), data range 1, over the
/// positions where the window fits. RGB averages the three channels.
pub fn ssim<S: Scalar>(a: &Image<S>, b: &Image<S>, border: usize, space: MetricSpace) -> Result<f64> {
    let (pa, pb, h, w) = planes(a, b, border, space)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} after cropping, got {h}x{w}")));
    }
    let sum: f64 = pa.iter().zip(&pb).map(|(x, y)| ssim_plane(x, y, h, w)).sum();
    Ok(sum / pa.len() as f64)
}

/// Cosine similarity between two flattened tensors.
pub fn cosine_similarity<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
    let na: f64 = a.data().iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.data().iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(f64::MIN_POSITIVE)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Scores for one degradation over the whole image set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecResult {
    pub spec: DegradationSpec,
    pub label: String,
    pub images: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Identification attached to every report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub model_id: String,
    pub protocol: String,
    pub config_hash: String,
    pub git_rev: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(flatten)]
    pub meta: ReportMeta,
    pub scale: usize,
    pub metric_space: MetricSpace,
    pub border: usize,
    /// Unreadable inputs skipped while loading the dataset.
    pub skipped: usize,
    pub results: Vec<SpecResult>,
}

/// Column names of [`MetricReport::to_csv`].
pub const REPORT_COLUMNS: [&str; 16] = [
    "model_id",
    "protocol",
    "config_hash",
    "git_rev",
    "scale",
    "metric_space",
    "spec",
    "kernel",
    "width",
    "sigma1",
    "sigma2",
    "theta",
    "noise_level",
    "image",
    "psnr",
    "ssim",
];

fn kernel_columns(k: &KernelSpec) -> (&'static str, String, String, String, String) {
    match *k {
        KernelSpec::None => ("none", "0".into(), String::new(), String::new(), String::new()),
        KernelSpec::Isotropic { width } => ("isotropic", width.to_string(), String::new(), String::new(), String::new()),
        KernelSpec::Anisotropic { sigma1, sigma2, theta } => {
            ("anisotropic", String::new(), sigma1.to_string(), sigma2.to_string(), theta.to_string())
        }
    }
}

impl MetricReport {
    /// One row per (spec, image) plus a `mean` row per spec.
    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        for r in &self.results {
            let (kind, width, s1, s2, th) = kernel_columns(&r.spec.kernel);
            let rows = r.images.iter().map(|i| (i.image.as_str(), i.psnr, i.ssim)).chain([("mean", r.mean_psnr, r.mean_ssim)]);
            for (image, p, s) in rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},\"{}\",{kind},{width},{s1},{s2},{th},{},{image},{p:.6},{s:.6}",
                    self.meta.model_id,
                    self.meta.protocol,
                    self.meta.config_hash,
                    self.meta.git_rev,
                    self.scale,
                    self.metric_space.id(),
                    r.label,
                    r.spec.noise_level,
                );
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Compact `spec | PSNR | SSIM` table with one line per spec.
    pub fn summary_table(&self) -> String {
        let mut out = format!("{:<28} {:>9} {:>8}\n", "spec", "PSNR", "SSIM");
        for r in &self.results {
            let _ = writeln!(out, "{:<28} {:>9.3} {:>8.4}", r.label, r.mean_psnr, r.mean_ssim);
        }
        out
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.results.iter().map(|r| r.mean_psnr))
    }
}

/// Degrades every image of `set` with every spec, restores it with `method`
/// and scores the result against the HR image. Image `i` uses noise seed
/// `spec.seed + i`.
///
/// `method` receives `(lr, hr, spec)`; the HR image lets oracle baselines be
/// expressed through the same interface.
pub fn run_benchmark<S, F>(
    set: &HrSet<S>,
    specs: &[DegradationSpec],
    space: MetricSpace,
    meta: ReportMeta,
    mut method: F,
) -> Result<MetricReport>
where
    S: Scalar,
    F: FnMut(&Image<S>, &Image<S>, &DegradationSpec) -> Result<Image<S>>,
{
    if set.is_empty() {
        return Err(Error::Dataset("benchmark dataset is empty".into()));
    }
    let scale = specs.first().map_or(1, |s| s.scale);
    if let Some(s) = specs.iter().find(|s| s.scale != scale) {
        return Err(Error::config("protocol", format!("mixed scales in one benchmark ({} and {})", scale, s.scale)));
    }
    let mut results = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut images = Vec::with_capacity(set.len());
        for (i, (name, img)) in set.names.iter().zip(&set.images).enumerate() {
            let hr = img.crop_to_multiple(spec.scale)?;
            let lr = degrade(&hr, &spec.clone().with_seed(spec.seed.wrapping_add(i as u64)))?;
            let sr = method(&lr, &hr, spec)?;
            if sr.dims() != hr.dims() {
                return Err(Error::Shape(format!("{name}: restored {:?}, HR {:?}", sr.dims(), hr.dims())));
            }
            images.push(ImageScore {
                image: name.clone(),
                psnr: psnr(&sr, &hr, scale, space)?,
                ssim: ssim(&sr, &hr, scale, space)?,
            });
            log::debug!("{} {name}: {:.3} dB", spec.label(), images.last().map_or(0.0, |s| s.psnr));
        }
        results.push(SpecResult {
            spec: spec.clone(),
            label: spec.label(),
            mean_psnr: mean(images.iter().map(|s| s.psnr)),
            mean_ssim: mean(images.iter().map(|s| s.ssim)),
            images,
        });
    }
    Ok(MetricReport { meta, scale, metric_space: space, border: scale, skipped: set.skipped.len(), results })
}

/// Restoration by the model with the prior sampled from `seed`.
pub fn model_method<'m, S: Scalar>(
    model: &'m Model<S>,
    schedule: &'m Schedule,
    seed: u64,
) -> impl FnMut(&Image<S>, &Image<S>, &DegradationSpec) -> Result<Image<S>> + 'm {
    move |lr, _, _| model.infer(lr, schedule, seed)
}

/// Bicubic upscaling of the LR input.
pub fn bicubic_method<S: Scalar>(lr: &Image<S>, _hr: &Image<S>, spec: &DegradationSpec) -> Result<Image<S>> {
    Ok(crate::imaging::bicubic_upscale(lr, spec.scale).clamp01())
}

/// Returns the HR image; scores 100 dB by construction.
pub fn copy_hr_method<S: Scalar>(_lr: &Image<S>, hr: &Image<S>, _spec: &DegradationSpec) -> Result<Image<S>> {
    Ok(hr.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub prior: PriorMode,
    /// One value per entry of [`AblationReport::widths`].
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub widths: Vec<f64>,
    pub scale: usize,
    pub metric_space: MetricSpace,
    pub git_rev: String,
    pub rows: Vec<AblationRow>,
    /// model1 output did not change when fed two different prior vectors.
    pub model1_prior_invariant: bool,
    /// model4 >= max(model2, model3) >= model1 on mean PSNR. Indicative only.
    pub ordering_holds: bool,
}

impl AblationReport {
    pub fn row(&self, prior: PriorMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.prior == prior)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,prior");
        for w in &self.widths {
            let _ = write!(out, ",psnr_w{w},ssim_w{w}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.variant, serde_json::to_value(r.prior).map(|v| v.as_str().unwrap_or("").to_string()).unwrap_or_default());
            for (p, s) in r.psnr.iter().zip(&r.ssim) {
                let _ = write!(out, ",{p:.6},{s:.6}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Scores the four prior variants at [`ABLATION_WIDTHS`]. Models must be
/// given in any order but cover each [`PriorMode`] exactly once and share a
/// scale.
pub fn run_ablation<S: Scalar>(
    models: &[&Model<S>],
    set: &HrSet<S>,
    schedule: &Schedule,
    space: MetricSpace,
    seed: u64,
    git_rev: &str,
) -> Result<AblationReport> {
    if models.len() != 4 {
        return Err(Error::MissingComponent(format!("ablation needs 4 models (model1..model4), got {}", models.len())));
    }
    let order = [PriorMode::None, PriorMode::Degradation, PriorMode::Content, PriorMode::Full];
    let mut sorted = Vec::with_capacity(4);
    for mode in order {
        let found: Vec<_> = models.iter().filter(|m| m.config.prior == mode).collect();
        match found.as_slice() {
            [m] => sorted.push(**m),
            [] => return Err(Error::MissingComponent(format!("no {} ({mode:?}) model for the ablation", mode.ablation_name()))),
            _ => return Err(Error::config("ablation", format!("{} given more than once", mode.ablation_name()))),
        }
    }
    let scale = sorted[0].scale();
    if sorted.iter().any(|m| m.scale() != scale) {
        return Err(Error::config("ablation", "models disagree on the scale factor"));
    }
    if set.is_empty() {
        return Err(Error::Dataset("ablation dataset is empty".into()));
    }

    let model1_prior_invariant = prior_invariant(sorted[0], &set.images[0].crop_to_multiple(scale)?)?;
    let mut rows = Vec::with_capacity(4);
    for m in &sorted {
        let (mut p, mut s) = (Vec::new(), Vec::new());
        for &w in &ABLATION_WIDTHS {
            let spec = DegradationSpec::isotropic(w, scale);
            let report = run_benchmark(set, &[spec], space, ReportMeta::default(), model_method(m, schedule, seed))?;
            p.push(report.results[0].mean_psnr);
            s.push(report.results[0].mean_ssim);
        }
        rows.push(AblationRow { variant: m.config.prior.ablation_name().to_string(), prior: m.config.prior, psnr: p, ssim: s });
    }
    let avg = |r: &AblationRow| mean(r.psnr.iter().copied());
    let (m1, m2, m3, m4) = (avg(&rows[0]), avg(&rows[1]), avg(&rows[2]), avg(&rows[3]));
    let ordering_holds = m4 >= m2.max(m3) && m2.max(m3) >= m1;
    Ok(AblationReport {
        widths: ABLATION_WIDTHS.to_vec(),
        scale,
        metric_space: space,
        git_rev: git_rev.to_string(),
        rows,
        model1_prior_invariant,
        ordering_holds,
    })
}

/// True when the SR output is bit-identical for two different prior vectors
/// (and, for prior-free models, for no prior at all).
pub fn prior_invariant<S: Scalar>(model: &Model<S>, hr: &Image<S>) -> Result<bool> {
    let lr = degrade(hr, &DegradationSpec::isotropic(1.2, model.scale()))?;
    let cz = model.config.cdp_dim;
    let z1 = Tensor::from_fn(&[1, cz], |i| S::from_f64_lossy((i as f64 * 0.37).sin()));
    let z2 = Tensor::from_fn(&[1, cz], |i| S::from_f64_lossy(3.0 - i as f64 * 0.11));
    let a = model.infer_with_prior(&lr, Some(&z1))?;
    let same = a == model.infer_with_prior(&lr, Some(&z2))?;
    if model.uses_prior() {
        return Ok(same);
    }
    Ok(same && a == model.infer_with_prior(&lr, None)?)
}

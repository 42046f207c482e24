//! HR image sources and batch assembly for training.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use blindsr_tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::degradation::{degrade, DegradationSpec};
use crate::error::{Error, Result};
use crate::imaging::Image;

/// Procedural RGB image: soft blobs and a couple of low-frequency waves around
/// mid-grey, overlaid with anti-aliased disks and half-planes so that the
/// image has sharp edges. Values are bounded to `[0.05, 0.95]`.
pub fn synthetic_image(seed: u64, height: usize, width: usize) -> Image<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = height.max(width) as f64;
    let colour = |rng: &mut ChaCha8Rng, a: f64| -> [f64; 3] { [rng.gen_range(-a..a), rng.gen_range(-a..a), rng.gen_range(-a..a)] };
    let waves: Vec<_> = (0..2)
        .map(|_| {
            let cycles = rng.gen_range(0.5..2.0);
            let angle = rng.gen_range(0.0..PI);
            let phase = rng.gen_range(0.0..2.0 * PI);
            (cycles / size * angle.cos(), cycles / size * angle.sin(), phase, colour(&mut rng, 0.08))
        })
        .collect();
    let blobs: Vec<_> = (0..2)
        .map(|_| {
            let (cy, cx) = (rng.gen_range(0.0..height as f64), rng.gen_range(0.0..width as f64));
            let r = rng.gen_range(0.15..0.35) * size;
            (cy, cx, r, colour(&mut rng, 0.15))
        })
        .collect();
    // Signed-distance shapes: (kind, a, b, c, colour). Disks use (cy, cx, r);
    // half-planes use (normal angle, offset, unused).
    let shapes: Vec<_> = (0..10)
        .map(|i| {
            let amp = colour(&mut rng, 0.3);
            if i % 2 == 0 {
                let (cy, cx) = (rng.gen_range(0.0..height as f64), rng.gen_range(0.0..width as f64));
                (true, cy, cx, rng.gen_range(0.06..0.2) * size, amp)
            } else {
                let angle = rng.gen_range(0.0..2.0 * PI);
                (false, angle, rng.gen_range(-0.3..0.3) * size, 0.0, amp)
            }
        })
        .collect();
    let base = colour(&mut rng, 0.12).map(|v| 0.5 + v);
    let (my, mx) = (height as f64 / 2.0, width as f64 / 2.0);
    Image::from_fn(height, width, |c, y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let mut v = base[c];
        for (fx, fy, phase, amp) in &waves {
            v += amp[c] * (2.0 * PI * (fx * xf + fy * yf) + phase).sin();
        }
        for (cy, cx, r, amp) in &blobs {
            let d2 = (yf - cy).powi(2) + (xf - cx).powi(2);
            v += amp[c] * (-d2 / (2.0 * r * r)).exp();
        }
        for &(disk, a, b, r, amp) in &shapes {
            let dist = if disk {
                r - ((yf - a).powi(2) + (xf - b).powi(2)).sqrt()
            } else {
                (xf - mx) * a.cos() + (yf - my) * a.sin() - b
            };
            // Logistic edge about half a pixel wide.
            v += amp[c] / (1.0 + (-dist / 0.35).exp());
        }
        v.clamp(0.05, 0.95) as f32
    })
}

/// Sorted list of `*.png` files in `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Named HR images.
#[derive(Clone, Debug)]
pub struct HrSet<S: Scalar> {
    pub names: Vec<String>,
    pub images: Vec<Image<S>>,
    /// Files that could not be decoded.
    pub skipped: Vec<PathBuf>,
}

impl<S: Scalar> HrSet<S> {
    pub fn synthetic(seed: u64, count: usize, height: usize, width: usize) -> Self {
        let names = (0..count).map(|i| format!("synthetic_{i:03}")).collect();
        let images = (0..count).map(|i| synthetic_image(seed.wrapping_add(i as u64), height, width).cast()).collect();
        Self { names, images, skipped: Vec::new() }
    }

    /// Loads every PNG in `dir`. Unreadable files are skipped with a warning;
    /// an empty result is an error.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut names = Vec::new();
        let mut images = Vec::new();
        let mut skipped = Vec::new();
        for path in list_pngs(dir)? {
            match Image::<f32>::load_png(&path) {
                Ok(img) => {
                    names.push(path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
                    images.push(img.cast());
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    skipped.push(path);
                }
            }
        }
        if images.is_empty() {
            return Err(Error::Dataset(format!("no readable PNG images in {}", dir.display())));
        }
        Ok(Self { names, images, skipped })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// One training batch: HR patches, their degraded LR versions and the source
/// indices.
#[derive(Clone, Debug)]
pub struct Batch<S: Scalar> {
    pub hr: Tensor<S>,
    pub lr: Tensor<S>,
    pub indices: Vec<usize>,
    pub spec: DegradationSpec,
}

/// Crops a random `hr_patch` square from each selected image (the whole image
/// when it already has that size) and degrades it with `spec`; sample `i`
/// uses noise seed `spec.seed + i`.
pub fn make_batch<S: Scalar>(
    set: &HrSet<S>,
    indices: &[usize],
    hr_patch: usize,
    spec: &DegradationSpec,
    rng: &mut impl Rng,
) -> Result<Batch<S>> {
    let mut hrs = Vec::with_capacity(indices.len());
    let mut lrs = Vec::with_capacity(indices.len());
    for (i, &idx) in indices.iter().enumerate() {
        let img = &set.images[idx];
        let (h, w) = img.dims();
        if h < hr_patch || w < hr_patch {
            return Err(Error::Dataset(format!(
                "{} is {h}x{w}, smaller than the {hr_patch}px training patch",
                set.names[idx]
            )));
        }
        let top = rng.gen_range(0..=h - hr_patch);
        let left = rng.gen_range(0..=w - hr_patch);
        let hr = img.crop(top, left, hr_patch, hr_patch)?;
        let lr = degrade(&hr, &spec.clone().with_seed(spec.seed.wrapping_add(i as u64)))?;
        hrs.push(hr);
        lrs.push(lr);
    }
    Ok(Batch {
        hr: Image::batch(&hrs.iter().collect::<Vec<_>>())?,
        lr: Image::batch(&lrs.iter().collect::<Vec<_>>())?,
        indices: indices.to_vec(),
        spec: spec.clone(),
    })
}

/// Visiting order for one epoch: a seeded shuffle of all indices, cycled if
/// more samples are needed.
pub fn epoch_order(len: usize, needed: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.iter().copied().cycle().take(needed.max(len)).collect()
}

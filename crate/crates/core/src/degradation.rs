//! Synthetic degradation: blur with a Gaussian kernel, bicubic downscale,
//! additive Gaussian noise, clamp.

use std::f64::consts::PI;
use std::path::Path;

use blindsr_tensor::{lit, reflect_index, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{DegradationSampling, KernelFamily};
use crate::error::{Error, Result};
use crate::imaging::{bicubic_downscale, Image};

/// Kernel side used everywhere unless configured otherwise.
pub const DEFAULT_KERNEL_SIZE: usize = 21;

/// Normalised, non-negative `k x k` blur kernel (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    size: usize,
    weights: Vec<f64>,
}

impl BlurKernel {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }

    pub fn center(&self) -> f64 {
        self.at(self.size / 2, self.size / 2)
    }

    pub fn is_delta(&self) -> bool {
        self.center() == 1.0
    }

    pub fn delta(size: usize) -> Result<Self> {
        check_size(size)?;
        let mut weights = vec![0.0; size * size];
        weights[(size / 2) * size + size / 2] = 1.0;
        Ok(Self { size, weights })
    }

    fn from_density(size: usize, density: impl Fn(f64, f64) -> f64) -> Self {
        let r = (size / 2) as f64;
        let mut weights = Vec::with_capacity(size * size);
        for row in 0..size {
            for col in 0..size {
                weights.push(density(col as f64 - r, row as f64 - r));
            }
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Self { size, weights }
    }
}

fn check_size(size: usize) -> Result<()> {
    if size % 2 == 0 {
        Err(Error::config("kernel_size", format!("kernel size must be odd, got {size}")))
    } else {
        Ok(())
    }
}

/// Isotropic Gaussian `exp(-(x^2+y^2) / 2 sigma^2)`, normalised. Width 0 is the
/// delta kernel (no blur).
pub fn make_isotropic_kernel(width: f64, size: usize) -> Result<BlurKernel> {
    check_size(size)?;
    if !(width >= 0.0) || !width.is_finite() {
        return Err(Error::config("width", format!("kernel width must be >= 0, got {width}")));
    }
    if width == 0.0 {
        return BlurKernel::delta(size);
    }
    let two_var = 2.0 * width * width;
    Ok(BlurKernel::from_density(size, |x, y| (-(x * x + y * y) / two_var).exp()))
}

/// Anisotropic Gaussian with covariance `R(theta) diag(s1^2, s2^2) R(theta)^T`.
/// `x` runs along columns, `y` along rows.
pub fn make_anisotropic_kernel(sigma1: f64, sigma2: f64, theta: f64, size: usize) -> Result<BlurKernel> {
    check_size(size)?;
    if !(sigma1 > 0.0 && sigma2 > 0.0) {
        return Err(Error::config("sigma", format!("anisotropic sigmas must be positive, got ({sigma1}, {sigma2})")));
    }
    let (c, s) = (theta.cos(), theta.sin());
    let (v1, v2) = (sigma1 * sigma1, sigma2 * sigma2);
    // inverse covariance = R diag(1/v1, 1/v2) R^T
    let a = c * c / v1 + s * s / v2;
    let b = c * s / v1 - c * s / v2;
    let d = s * s / v1 + c * c / v2;
    Ok(BlurKernel::from_density(size, |x, y| (-0.5 * (a * x * x + 2.0 * b * x * y + d * y * y)).exp()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelSpec {
    None,
    Isotropic { width: f64 },
    Anisotropic { sigma1: f64, sigma2: f64, theta: f64 },
}

/// Complete description of one synthetic degradation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kernel: KernelSpec,
    pub kernel_size: usize,
    pub scale: usize,
    /// Noise std in 8-bit units (applied as `noise_level / 255`).
    pub noise_level: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn isotropic(width: f64, scale: usize) -> Self {
        Self { kernel: KernelSpec::Isotropic { width }, kernel_size: DEFAULT_KERNEL_SIZE, scale, noise_level: 0.0, seed: 0 }
    }

    pub fn anisotropic(sigma1: f64, sigma2: f64, theta: f64, scale: usize) -> Self {
        Self {
            kernel: KernelSpec::Anisotropic { sigma1, sigma2, theta },
            kernel_size: DEFAULT_KERNEL_SIZE,
            scale,
            noise_level: 0.0,
            seed: 0,
        }
    }

    pub fn identity() -> Self {
        Self { kernel: KernelSpec::None, kernel_size: DEFAULT_KERNEL_SIZE, scale: 1, noise_level: 0.0, seed: 0 }
    }

    pub fn with_noise(mut self, noise_level: f64) -> Self {
        self.noise_level = noise_level;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_size(self.kernel_size)?;
        if self.scale < 1 {
            return Err(Error::config("scale", "scale must be >= 1"));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::config("noise_level", format!("must be >= 0, got {}", self.noise_level)));
        }
        match self.kernel {
            KernelSpec::Isotropic { width } if !(width >= 0.0) => {
                Err(Error::config("width", format!("kernel width must be >= 0, got {width}")))
            }
            KernelSpec::Anisotropic { sigma1, sigma2, .. } if !(sigma1 > 0.0 && sigma2 > 0.0) => {
                Err(Error::config("sigma", "anisotropic sigmas must be positive"))
            }
            _ => Ok(()),
        }
    }

    pub fn kernel(&self) -> Result<BlurKernel> {
        match self.kernel {
            KernelSpec::None => BlurKernel::delta(self.kernel_size),
            KernelSpec::Isotropic { width } => make_isotropic_kernel(width, self.kernel_size),
            KernelSpec::Anisotropic { sigma1, sigma2, theta } => {
                make_anisotropic_kernel(sigma1, sigma2, theta, self.kernel_size)
            }
        }
    }

    /// Short human label, e.g. `iso1.2` or `aniso(2,0.7,0.79)+n5`.
    pub fn label(&self) -> String {
        let k = match self.kernel {
            KernelSpec::None => "none".to_string(),
            KernelSpec::Isotropic { width } => format!("iso{width}"),
            KernelSpec::Anisotropic { sigma1, sigma2, theta } => format!("aniso({sigma1},{sigma2},{theta:.2})"),
        };
        if self.noise_level > 0.0 {
            format!("{k}+n{}", self.noise_level)
        } else {
            k
        }
    }
}

/// Correlate each channel with `kernel`, reflect padding at the borders.
pub fn blur<S: Scalar>(img: &Image<S>, kernel: &BlurKernel) -> Image<S> {
    if kernel.is_delta() {
        return img.clone();
    }
    let (h, w) = img.dims();
    let k = kernel.size();
    let r = (k / 2) as isize;
    let rows: Vec<Vec<usize>> =
        (0..h).map(|y| (0..k).map(|i| reflect_index(y as isize + i as isize - r, h)).collect()).collect();
    let cols: Vec<Vec<usize>> =
        (0..w).map(|x| (0..k).map(|j| reflect_index(x as isize + j as isize - r, w)).collect()).collect();
    let mut out = Image::filled(h, w, S::zero());
    for c in 0..3 {
        let plane = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &sy) in rows[y].iter().enumerate() {
                    let krow = &kernel.weights()[i * k..(i + 1) * k];
                    let prow = &plane[sy * w..(sy + 1) * w];
                    for (j, &sx) in cols[x].iter().enumerate() {
                        acc += krow[j] * prow[sx].as_f64();
                    }
                }
                out.set(c, y, x, lit(acc));
            }
        }
    }
    out
}

/// Adds `N(0, (noise_level/255)^2)` per sample, drawn plane by plane.
pub fn add_noise<S: Scalar>(img: &Image<S>, noise_level: f64, seed: u64) -> Image<S> {
    if noise_level == 0.0 {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_level / 255.0).expect("valid std");
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = lit(v.as_f64() + normal.sample(&mut rng));
    }
    out
}

/// `LR = clamp((HR * k) downscaled by s + n)`.
///
/// The HR image is first cropped (bottom/right) to a multiple of the scale.
pub fn degrade<S: Scalar>(hr: &Image<S>, spec: &DegradationSpec) -> Result<Image<S>> {
    spec.validate()?;
    let hr = hr.crop_to_multiple(spec.scale)?;
    let blurred = blur(&hr, &spec.kernel()?);
    let down = if spec.scale == 1 { blurred } else { bicubic_downscale(&blurred, spec.scale)? };
    let noisy = add_noise(&down, spec.noise_level, spec.seed);
    Ok(noisy.clamp01())
}

/// Draws one degradation from the training ranges.
pub fn sample_spec(sampling: &DegradationSampling, scale: usize, rng: &mut impl Rng) -> DegradationSpec {
    let draw = |rng: &mut dyn rand::RngCore, r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.gen_range(r[0]..=r[1]) };
    let kernel = match sampling.kernel {
        KernelFamily::None => KernelSpec::None,
        KernelFamily::Isotropic => KernelSpec::Isotropic { width: draw(rng, sampling.width_range) },
        KernelFamily::Anisotropic => KernelSpec::Anisotropic {
            sigma1: draw(rng, sampling.sigma_range),
            sigma2: draw(rng, sampling.sigma_range),
            theta: rng.gen_range(0.0..PI),
        },
    };
    let noise_level = draw(rng, sampling.noise_range);
    DegradationSpec { kernel, kernel_size: sampling.kernel_size, scale, noise_level, seed: rng.gen() }
}

/// Evaluation protocols.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Noise-free isotropic kernels, per-scale width grid.
    IsotropicNoisefree,
    /// Nine anisotropic kernels crossed with three noise levels.
    General,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isotropic" | "isotropic_noisefree" => Ok(Protocol::IsotropicNoisefree),
            "general" | "anisotropic" => Ok(Protocol::General),
            other => Err(Error::config("protocol", format!("unknown protocol {other:?} (isotropic|general)"))),
        }
    }
}

impl Protocol {
    pub fn id(self) -> &'static str {
        match self {
            Protocol::IsotropicNoisefree => "isotropic_noisefree",
            Protocol::General => "general",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsotropicGrid {
    pub x2: Vec<f64>,
    pub x3: Vec<f64>,
    pub x4: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneralGrid {
    pub scale: usize,
    pub noise_levels: Vec<f64>,
    pub kernels: Vec<[f64; 3]>,
}

/// The checked-in protocol definition (`configs/protocols.toml`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolFile {
    pub version: u32,
    pub kernel_size: usize,
    pub isotropic: IsotropicGrid,
    pub general: GeneralGrid,
}

const BUILTIN_PROTOCOLS: &str = include_str!("../../../configs/protocols.toml");

impl ProtocolFile {
    pub fn builtin() -> Self {
        toml::from_str(BUILTIN_PROTOCOLS).expect("bundled protocols.toml parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(toml::from_str(&text)?)
    }

    pub fn widths(&self, scale: usize) -> Result<&[f64]> {
        match scale {
            2 => Ok(&self.isotropic.x2),
            3 => Ok(&self.isotropic.x3),
            4 => Ok(&self.isotropic.x4),
            s => Err(Error::config("scale", format!("no isotropic width grid for scale {s}"))),
        }
    }

    /// Specs for `protocol` at `scale`. Seeds are the grid index so noisy
    /// cells are reproducible.
    pub fn grid(&self, protocol: Protocol, scale: usize) -> Result<Vec<DegradationSpec>> {
        let specs: Vec<DegradationSpec> = match protocol {
            Protocol::IsotropicNoisefree => self
                .widths(scale)?
                .iter()
                .map(|&w| DegradationSpec { kernel_size: self.kernel_size, ..DegradationSpec::isotropic(w, scale) })
                .collect(),
            Protocol::General => self
                .general
                .noise_levels
                .iter()
                .flat_map(|&n| {
                    self.general.kernels.iter().map(move |&[s1, s2, th]| DegradationSpec {
                        kernel_size: self.kernel_size,
                        ..DegradationSpec::anisotropic(s1, s2, th, scale).with_noise(n)
                    })
                })
                .collect(),
        };
        Ok(specs.into_iter().enumerate().map(|(i, s)| s.with_seed(i as u64)).collect())
    }
}

/// Grid from the bundled protocol file.
pub fn make_protocol_grid(protocol: Protocol, scale: usize) -> Result<Vec<DegradationSpec>> {
    ProtocolFile::builtin().grid(protocol, scale)
}

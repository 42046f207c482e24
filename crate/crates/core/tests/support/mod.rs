//! Independent reference implementations used by the integration and
//! acceptance tests. Everything here is written with explicit loops over
//! plain `f64` buffers and shares no code with the library beyond reading
//! parameter values out of a store.

#![allow(dead_code)]

use std::f64::consts::PI;

use blindsr_core::degradation::{DegradationSpec, KernelSpec};
use blindsr_core::imaging::Image;
use blindsr_tensor::{gradcheck::relative_error, Ctx, ParamId, ParamStore, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// A `C x H x W` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl Map {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, d: vec![0.0; c * h * w] }
    }

    pub fn from_fn(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(c, h, w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    m.d[(ch * h + y) * w + x] = f(ch, y, x);
                }
            }
        }
        m
    }

    pub fn random(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Self {
        Self::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.d[(c * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.d[(c * self.h + y) * self.w + x] = v;
    }

    pub fn add(&self, o: &Map) -> Map {
        Map { d: self.d.iter().zip(&o.d).map(|(a, b)| a + b).collect(), ..self.clone() }
    }

    pub fn max_abs_diff(&self, o: &[f64]) -> f64 {
        assert_eq!(self.d.len(), o.len());
        self.d.iter().zip(o).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Image<f64> {
    Image::from_fn(h, w, |_, _, _| rng.gen_range(0.0..1.0))
}

// ---------------------------------------------------------------------------
// Degradation

/// Kernel built from the covariance matrix itself: form `Sigma`, invert the
/// 2x2 matrix numerically, evaluate the density, normalise.
pub fn oracle_kernel(spec: &KernelSpec, size: usize) -> Vec<f64> {
    let r = (size / 2) as isize;
    let density: Box<dyn Fn(f64, f64) -> f64> = match *spec {
        KernelSpec::None => Box::new(|x, y| if x == 0.0 && y == 0.0 { 1.0 } else { 0.0 }),
        KernelSpec::Isotropic { width } if width == 0.0 => {
            Box::new(|x, y| if x == 0.0 && y == 0.0 { 1.0 } else { 0.0 })
        }
        KernelSpec::Isotropic { width } => Box::new(move |x, y| (-(x * x + y * y) / (2.0 * width * width)).exp()),
        KernelSpec::Anisotropic { sigma1, sigma2, theta } => {
            let rot = [[theta.cos(), -theta.sin()], [theta.sin(), theta.cos()]];
            let lam = [sigma1 * sigma1, sigma2 * sigma2];
            let mut cov = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] = (0..2).map(|k| rot[i][k] * lam[k] * rot[j][k]).sum();
                }
            }
            let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
            let inv = [[cov[1][1] / det, -cov[0][1] / det], [-cov[1][0] / det, cov[0][0] / det]];
            Box::new(move |x, y| {
                let v = [x, y];
                let q: f64 = (0..2).map(|i| (0..2).map(|j| v[i] * inv[i][j] * v[j]).sum::<f64>()).sum();
                (-0.5 * q).exp()
            })
        }
    };
    let mut k = Vec::with_capacity(size * size);
    for row in -r..=r {
        for col in -r..=r {
            k.push(density(col as f64, row as f64));
        }
    }
    let s: f64 = k.iter().sum();
    k.iter().map(|v| v / s).collect()
}

/// Explicitly padded (mirror without edge repeat) 2-D correlation.
pub fn oracle_blur(img: &Image<f64>, kernel: &[f64], size: usize) -> Image<f64> {
    let (h, w) = img.dims();
    let r = size / 2;
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i } else { 2 * (n - 1) - i };
        }
        i as usize
    };
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut out = Image::filled(h, w, 0.0);
    for c in 0..3 {
        let mut pad = vec![0.0; ph * pw];
        for y in 0..ph {
            for x in 0..pw {
                let sy = mirror(y as isize - r as isize, h);
                let sx = mirror(x as isize - r as isize, w);
                pad[y * pw + x] = img.get(c, sy, sx);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for i in 0..size {
                    for j in 0..size {
                        acc += kernel[i * size + j] * pad[(y + i) * pw + x + j];
                    }
                }
                out.set(c, y, x, acc);
            }
        }
    }
    out
}

fn keys(x: f64) -> f64 {
    let a = -0.5;
    let t = x.abs();
    if t <= 1.0 {
        (a + 2.0) * t.powi(3) - (a + 3.0) * t.powi(2) + 1.0
    } else if t < 2.0 {
        a * t.powi(3) - 5.0 * a * t.powi(2) + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Antialiased bicubic taps written after the 1-based `imresize` recipe.
/// Returns a dense `out x in` matrix.
pub fn oracle_resize_matrix(n_in: usize, n_out: usize) -> Vec<Vec<f64>> {
    let scale = n_out as f64 / n_in as f64;
    let (kernel_width, antialias) = if scale < 1.0 { (4.0 / scale, scale) } else { (4.0, 1.0) };
    let mut m = vec![vec![0.0; n_in]; n_out];
    for (i, row) in m.iter_mut().enumerate() {
        let x = (i + 1) as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
        let left = (x - kernel_width / 2.0).floor() as i64;
        let p = kernel_width.ceil() as i64 + 2;
        let idx: Vec<i64> = (0..p).map(|k| left + k).collect();
        let wts: Vec<f64> = idx.iter().map(|&j| antialias * keys(antialias * (x - j as f64))).collect();
        let total: f64 = wts.iter().sum();
        // aux = [1..n, n..1]
        let aux: Vec<usize> = (1..=n_in).chain((1..=n_in).rev()).collect();
        for (&j, &wt) in idx.iter().zip(&wts) {
            let k = aux[((j - 1).rem_euclid(2 * n_in as i64)) as usize] - 1;
            row[k] += wt / total;
        }
    }
    m
}

/// Dense 2-D resize: `out[y][x] = sum_i sum_j Wy[y][i] Wx[x][j] in[i][j]`.
pub fn oracle_resize(img: &Image<f64>, out_h: usize, out_w: usize) -> Image<f64> {
    let (h, w) = img.dims();
    let wy = oracle_resize_matrix(h, out_h);
    let wx = oracle_resize_matrix(w, out_w);
    Image::from_fn(out_h, out_w, |c, y, x| {
        let mut acc = 0.0;
        for i in 0..h {
            if wy[y][i] == 0.0 {
                continue;
            }
            for j in 0..w {
                acc += wy[y][i] * wx[x][j] * img.get(c, i, j);
            }
        }
        acc
    })
}

/// Crop, blur, downscale, add seeded noise, clamp.
pub fn oracle_degrade(hr: &Image<f64>, spec: &DegradationSpec) -> Image<f64> {
    let s = spec.scale;
    let (h, w) = hr.dims();
    let hr = hr.crop(0, 0, h / s * s, w / s * s).unwrap();
    let k = oracle_kernel(&spec.kernel, spec.kernel_size);
    let blurred = oracle_blur(&hr, &k, spec.kernel_size);
    let mut lr = if s == 1 { blurred } else { oracle_resize(&blurred, hr.height() / s, hr.width() / s) };
    if spec.noise_level > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let n = Normal::new(0.0, spec.noise_level / 255.0).unwrap();
        for v in lr.data_mut() {
            *v += n.sample(&mut rng);
        }
    }
    lr.map(|v| v.clamp(0.0, 1.0))
}

pub fn random_spec(rng: &mut impl Rng) -> DegradationSpec {
    let scale = [2, 3, 4][rng.gen_range(0..3)];
    let spec = match rng.gen_range(0..3) {
        0 => DegradationSpec::isotropic(if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.2..3.0) }, scale),
        1 => DegradationSpec::anisotropic(rng.gen_range(0.5..4.0), rng.gen_range(0.5..4.0), rng.gen_range(0.0..PI), scale),
        _ => DegradationSpec::isotropic(rng.gen_range(0.2..3.0), scale).with_noise(rng.gen_range(1.0..25.0)),
    };
    spec.with_seed(rng.gen())
}

// ---------------------------------------------------------------------------
// Attention

fn softmax(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Softmax attention among the positions of each `wh x ww` window, per head,
/// scaled by `1/sqrt(d)`.
pub fn oracle_window_attention(q: &Map, k: &Map, v: &Map, heads: usize, window: [usize; 2]) -> Map {
    let (c, h, w) = (q.c, q.h, q.w);
    let d = c / heads;
    let mut out = Map::zeros(c, h, w);
    for head in 0..heads {
        let chans: Vec<usize> = (head * d..(head + 1) * d).collect();
        for wy in (0..h).step_by(window[0]) {
            for wx in (0..w).step_by(window[1]) {
                let pos: Vec<(usize, usize)> =
                    (0..window[0]).flat_map(|i| (0..window[1]).map(move |j| (wy + i, wx + j))).collect();
                for &(py, px) in &pos {
                    let mut scores: Vec<f64> = pos
                        .iter()
                        .map(|&(ky, kx)| chans.iter().map(|&ch| q.at(ch, py, px) * k.at(ch, ky, kx)).sum::<f64>() / (d as f64).sqrt())
                        .collect();
                    softmax(&mut scores);
                    for &ch in &chans {
                        let val: f64 = pos.iter().zip(&scores).map(|(&(ky, kx), a)| a * v.at(ch, ky, kx)).sum();
                        out.set(ch, py, px, val);
                    }
                }
            }
        }
    }
    out
}

/// Per head, `softmax_row(Q K^T / alpha) V` with channels as the attended axis.
pub fn oracle_channel_attention(q: &Map, k: &Map, v: &Map, heads: usize, alpha: &[f64]) -> Map {
    let (c, h, w) = (q.c, q.h, q.w);
    let d = c / heads;
    let mut out = Map::zeros(c, h, w);
    for head in 0..heads {
        for a in 0..d {
            let ca = head * d + a;
            let mut aff: Vec<f64> = (0..d)
                .map(|b| {
                    let cb = head * d + b;
                    let mut s = 0.0;
                    for y in 0..h {
                        for x in 0..w {
                            s += q.at(ca, y, x) * k.at(cb, y, x);
                        }
                    }
                    s / alpha[head]
                })
                .collect();
            softmax(&mut aff);
            for y in 0..h {
                for x in 0..w {
                    let val: f64 = (0..d).map(|b| aff[b] * v.at(head * d + b, y, x)).sum();
                    out.set(ca, y, x, val);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Layers over `Map`s, reading weights from a parameter store.

pub fn param(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.get(id).data().to_vec()
}

/// Zero-padded "same" convolution; `groups` is 1 or `cin` (depthwise).
pub fn conv(x: &Map, weight: &[f64], bias: Option<&[f64]>, cout: usize, k: usize, groups: usize) -> Map {
    let r = (k / 2) as isize;
    let cin_g = x.c / groups;
    let cout_g = cout / groups;
    Map::from_fn(cout, x.h, x.w, |o, y, xx| {
        let g = o / cout_g;
        let mut acc = bias.map_or(0.0, |b| b[o]);
        for ci in 0..cin_g {
            let cin = g * cin_g + ci;
            for i in 0..k {
                for j in 0..k {
                    let sy = y as isize + i as isize - r;
                    let sx = xx as isize + j as isize - r;
                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                        continue;
                    }
                    acc += weight[((o * cin_g + ci) * k + i) * k + j] * x.at(cin, sy as usize, sx as usize);
                }
            }
        }
        acc
    })
}

pub fn conv_named(store: &ParamStore<f64>, prefix: &str, x: &Map, cout: usize, k: usize, groups: usize) -> Map {
    let w = param(store, &format!("{prefix}.weight"));
    let b = store.find(&format!("{prefix}.bias")).map(|id| store.get(id).data().to_vec());
    conv(x, &w, b.as_deref(), cout, k, groups)
}

/// Per-position layer norm over channels, eps 1e-5, no affine.
pub fn layer_norm(x: &Map) -> Map {
    let mut out = x.clone();
    for y in 0..x.h {
        for xx in 0..x.w {
            let vals: Vec<f64> = (0..x.c).map(|c| x.at(c, y, xx)).collect();
            let mean = vals.iter().sum::<f64>() / x.c as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.c as f64;
            for c in 0..x.c {
                out.set(c, y, xx, (vals[c] - mean) / (var + 1e-5).sqrt());
            }
        }
    }
    out
}

pub fn linear(store: &ParamStore<f64>, prefix: &str, z: &[f64]) -> Vec<f64> {
    let w = param(store, &format!("{prefix}.weight"));
    let b = param(store, &format!("{prefix}.bias"));
    let n_in = z.len();
    (0..b.len()).map(|o| b[o] + (0..n_in).map(|i| w[o * n_in + i] * z[i]).sum::<f64>()).collect()
}

/// `LN(F) * scale(z) + shift(z)`.
pub fn injection(store: &ParamStore<f64>, prefix: &str, f: &Map, z: &[f64]) -> Map {
    let a = linear(store, &format!("{prefix}.scale"), z);
    let b = linear(store, &format!("{prefix}.shift"), z);
    let n = layer_norm(f);
    Map::from_fn(f.c, f.h, f.w, |c, y, x| n.at(c, y, x) * a[c] + b[c])
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
}

/// Gate map `[1, H, W]` from mean/max over channels.
pub fn spatial_gate(store: &ParamStore<f64>, prefix: &str, f: &Map) -> Map {
    let pooled = Map::from_fn(2, f.h, f.w, |k, y, x| {
        let vals = (0..f.c).map(|c| f.at(c, y, x));
        if k == 0 {
            vals.sum::<f64>() / f.c as f64
        } else {
            vals.fold(f64::NEG_INFINITY, f64::max)
        }
    });
    let g = conv_named(store, prefix, &pooled, 1, 7, 1);
    Map { d: g.d.iter().map(|&v| sigmoid(v)).collect(), ..g }
}

/// One gate per channel from the global average.
pub fn channel_gate(store: &ParamStore<f64>, prefix: &str, f: &Map) -> Vec<f64> {
    let hw = (f.h * f.w) as f64;
    let gap = Map::from_fn(f.c, 1, 1, |c, _, _| (0..f.h).flat_map(|y| (0..f.w).map(move |x| (y, x))).map(|(y, x)| f.at(c, y, x)).sum::<f64>() / hw);
    let g = conv_named(store, prefix, &gap, f.c, 1, 1);
    g.d.iter().map(|&v| sigmoid(v)).collect()
}

pub fn ffn(store: &ParamStore<f64>, prefix: &str, x: &Map, expansion: usize) -> Map {
    let h = conv_named(store, &format!("{prefix}.fc1"), x, x.c * expansion, 1, 1);
    let h = Map { d: h.d.iter().map(|&v| gelu(v)).collect(), ..h };
    conv_named(store, &format!("{prefix}.fc2"), &h, x.c, 1, 1)
}

/// Direct evaluation of one refinement block for a single sample.
pub fn oracle_cdrb(
    store: &ParamStore<f64>,
    p: &str,
    x: &Map,
    z: &[f64],
    heads: usize,
    window: [usize; 2],
    expansion: usize,
) -> Map {
    let c = x.c;
    let qkv = |name: &str, h: &Map| -> (Map, Map, Map) {
        (
            conv_named(store, &format!("{p}.{name}.q"), h, c, 1, 1),
            conv_named(store, &format!("{p}.{name}.k"), h, c, 1, 1),
            conv_named(store, &format!("{p}.{name}.v"), h, c, 1, 1),
        )
    };
    // spatial half
    let h1 = injection(store, &format!("{p}.inject1"), x, z);
    let (q, k, v) = qkv("swsa", &h1);
    let attn = oracle_window_attention(&q, &k, &v, heads, window);
    let dconv = conv_named(store, &format!("{p}.dconv1"), &h1, c, 3, c);
    let s_gate = spatial_gate(store, &format!("{p}.interflow_s.spatial"), &dconv);
    let c_gate = channel_gate(store, &format!("{p}.interflow_s.channel"), &attn);
    let mixed = Map::from_fn(c, x.h, x.w, |ch, y, xx| attn.at(ch, y, xx) * s_gate.at(0, y, xx) + dconv.at(ch, y, xx) * c_gate[ch]);
    let f2 = mixed.add(x);
    let f3 = ffn(store, &format!("{p}.ffn1"), &injection(store, &format!("{p}.inject2"), &f2, z), expansion).add(&f2);
    // channel half
    let h3 = injection(store, &format!("{p}.inject3"), &f3, z);
    let (q, k, v) = qkv("cwsa", &h3);
    let alpha: Vec<f64> = param(store, &format!("{p}.cwsa.log_alpha")).iter().map(|a| a.exp()).collect();
    let attn = oracle_channel_attention(&q, &k, &v, heads, &alpha);
    let dconv = conv_named(store, &format!("{p}.dconv2"), &h3, c, 3, c);
    let c_gate = channel_gate(store, &format!("{p}.interflow_c.channel"), &dconv);
    let s_gate = spatial_gate(store, &format!("{p}.interflow_c.spatial"), &attn);
    let mixed = Map::from_fn(c, x.h, x.w, |ch, y, xx| attn.at(ch, y, xx) * c_gate[ch] + dconv.at(ch, y, xx) * s_gate.at(0, y, xx));
    let f4 = mixed.add(&f3);
    ffn(store, &format!("{p}.ffn2"), &injection(store, &format!("{p}.inject4"), &f4, z), expansion).add(&f4)
}

// ---------------------------------------------------------------------------
// Metric reference

/// Deterministic integer-valued pairs; reference values below were
/// computed with scikit-image on the same formula.
pub fn metric_pair(i: usize) -> (Image<f64>, Image<f64>) {
    let av = |c: usize, y: usize, x: usize| (c * 97 + y * 31 + x * 17 + i * 53 + ((x * y) % 7) * 11 + (y / 4) * (x / 4) * 5) % 256;
    let a = Image::<f64>::from_fn(32, 32, |c, y, x| av(c, y, x) as f64 / 255.0);
    let b = Image::from_fn(32, 32, |c, y, x| {
        let d = ((i * 13 + c * 7 + y * 5 + x * 3) % 21) as i64 - 10;
        (av(c, y, x) as i64 + d * (1 + (i % 3) as i64)).clamp(0, 255) as f64 / 255.0
    });
    (a, b)
}

/// (PSNR Y, SSIM Y, PSNR RGB, SSIM RGB) with border 4.
pub const METRIC_REFERENCE: [(f64, f64, f64, f64); 20] = [
    (39.8366823544, 0.9965961537, 32.6329825539, 0.9963608780),
    (33.7350601757, 0.9837267303, 26.6686616420, 0.9853436163),
    (30.4256076755, 0.9688095709, 23.3039696824, 0.9681960162),
    (39.7315535637, 0.9960035215, 32.5906677571, 0.9962966060),
    (33.7685614270, 0.9832321088, 26.6587653945, 0.9854829752),
    (30.4553739316, 0.9698683864, 23.2486841623, 0.9683361122),
    (39.6667555891, 0.9956239939, 32.5786831519, 0.9962133146),
    (33.8637079026, 0.9869373634, 26.7004747985, 0.9856472584),
    (30.2679425777, 0.9601907777, 23.2374128888, 0.9682482367),
    (39.7735102242, 0.9961889520, 32.6057832043, 0.9962822238),
    (33.8115827444, 0.9849146163, 26.6253000543, 0.9855008750),
    (30.2569832919, 0.9627413625, 23.2162057919, 0.9672110896),
    (39.7530774344, 0.9966522508, 32.6297946034, 0.9963400517),
    (33.8188121190, 0.9815633064, 26.6198835486, 0.9850758971),
    (30.3596535912, 0.9684371894, 23.2431998313, 0.9686121137),
    (39.7803607986, 0.9960719545, 32.5981134494, 0.9963186271),
    (33.6777118565, 0.9829738944, 26.6568318070, 0.9852303042),
    (30.4288361072, 0.9708327167, 23.2951947682, 0.9689991019),
    (39.7397940088, 0.9955503126, 32.5559961533, 0.9962156071),
    (33.8395976069, 0.9859467412, 26.6540224782, 0.9855028890),
];

/// Smooth 48x48 probe with one hard-edged disk.
pub fn probe_image(i: usize) -> Image<f64> {
    Image::from_fn(48, 48, |c, y, x| {
        let (xf, yf, cf, i) = (x as f64, y as f64, c as f64, i as f64);
        let disk = if (xf - 24.0).powi(2) + (yf - 20.0).powi(2) < (10.0 + i).powi(2) { 0.2 } else { 0.0 };
        (0.45 + 0.25 * (0.21 * xf + 0.37 * cf + 0.5 * i).sin() * (0.17 * yf).cos() + disk).clamp(0.0, 1.0)
    })
}

/// PSNR (Y, border 4) of bicubic x4 down-then-up on `probe_image(0..5)`,
/// from a numpy imresize port scored with scikit-image.
pub const BICUBIC_X4_REFERENCE: [f64; 5] = [32.7852121588, 32.2337590244, 32.4684986503, 32.2112379223, 31.4241999052];

// ---------------------------------------------------------------------------
// Gradient probes

#[derive(Clone, Debug)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compares backprop and central-difference gradients of the scalar `f` for
/// `count` randomly chosen elements of parameters whose name starts with one
/// of `prefixes`.
pub fn probe_gradients<F>(store: &mut ParamStore<f64>, prefixes: &[&str], count: usize, seed: u64, h: f64, f: F) -> Vec<Probe>
where
    F: for<'t> Fn(&Ctx<'t, f64>) -> Var<'t, f64>,
{
    let candidates: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre)))
        .flat_map(|(id, p)| (0..p.value.len()).map(move |i| (id, i)))
        .collect();
    assert!(candidates.len() >= count, "only {} candidate elements", candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, candidates.len(), count);

    let analytic: Vec<(ParamId, Vec<f64>)> = {
        let tape = Tape::new();
        let ctx = Ctx::train(&tape, store);
        let out = f(&ctx);
        let grads = tape.backward(out);
        ctx.param_grads(grads).into_iter().map(|(id, g)| (id, g.data().to_vec())).collect()
    };
    let eval = |store: &ParamStore<f64>| {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, store);
        f(&ctx).value().item()
    };
    picks
        .iter()
        .map(|pick| {
            let (id, i) = candidates[pick];
            let a = analytic.iter().find(|(pid, _)| *pid == id).map_or(0.0, |(_, g)| g[i]);
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            Probe { name: store.name(id).to_string(), index: i, analytic: a, numeric, rel_error: relative_error(a, numeric) }
        })
        .collect()
}

pub fn worst(probes: &[Probe]) -> f64 {
    probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
}

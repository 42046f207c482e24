//! RGB image container, PNG I/O and bicubic resampling.

use std::path::Path;

use blindsr_tensor::{lit, Scalar, Tensor};

use crate::error::{Error, Result};

/// An RGB image with real intensities, stored as three planes (CHW).
#[derive(Clone, Debug, PartialEq)]
pub struct Image<S> {
    height: usize,
    width: usize,
    data: Vec<S>,
}

impl<S: Scalar> Image<S> {
    pub fn new(height: usize, width: usize, data: Vec<S>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image dims must be positive, got {height}x{width}")));
        }
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!("{} values for a {height}x{width}x3 image", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: S) -> Self {
        assert!(height > 0 && width > 0, "image dims must be positive");
        Self { height, width, data: vec![v; 3 * height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> S) -> Self {
        assert!(height > 0 && width > 0, "image dims must be positive");
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> S {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: S) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[S] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.max(S::zero()).min(S::one()))
    }

    pub fn cast<T: Scalar>(&self) -> Image<T> {
        Image { height: self.height, width: self.width, data: self.data.iter().map(|v| T::from_f64_lossy(v.as_f64())).collect() }
    }

    /// Top-left crop.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "crop {height}x{width}@({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(height, width, |c, y, x| self.get(c, top + y, left + x)))
    }

    /// Crops bottom/right so both dims are multiples of `s`.
    pub fn crop_to_multiple(&self, s: usize) -> Result<Self> {
        let h = self.height - self.height % s;
        let w = self.width - self.width % s;
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("{}x{} image is smaller than scale {s}", self.height, self.width)));
        }
        if (h, w) == (self.height, self.width) {
            Ok(self.clone())
        } else {
            self.crop(0, 0, h, w)
        }
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<S> {
        Tensor::new(vec![1, 3, self.height, self.width], self.data.clone())
    }

    /// Stacks equally sized images into `[N, 3, H, W]`.
    pub fn batch(images: &[&Image<S>]) -> Result<Tensor<S>> {
        let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.dims() != first.dims() {
                return Err(Error::Shape(format!("batch mixes {:?} and {:?}", img.dims(), first.dims())));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::new(vec![images.len(), 3, first.height, first.width], data))
    }

    /// Splits an `[N, 3, H, W]` tensor into images.
    pub fn unbatch(t: &Tensor<S>) -> Result<Vec<Image<S>>> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("expected [N,3,H,W], got {s:?}")));
        }
        let per = 3 * s[2] * s[3];
        t.data().chunks(per).map(|chunk| Image::new(s[2], s[3], chunk.to_vec())).collect()
    }

    /// BT.601 luma in `[0,1]` units (`16..235` studio range, divided by 255).
    pub fn luma(&self) -> Vec<S> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        let k = [lit::<S>(65.481), lit::<S>(128.553), lit::<S>(24.966)];
        let off = lit::<S>(16.0);
        let norm = lit::<S>(255.0);
        (0..r.len()).map(|i| (off + k[0] * r[i] + k[1] * g[i] + k[2] * b[i]) / norm).collect()
    }
}

impl Image<f32> {
    /// Reads an 8-bit PNG (any colour type) as RGB in `[0,1]` via `v/255`.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Self::from_fn(h, w, |c, y, x| img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0))
    }

    /// Quantises to 8-bit (round-to-nearest after clamping) and writes PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c: usize| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        });
        buf.save(path).map_err(|source| Error::Image { path: path.into(), source })
    }

    /// Round-trips through 8-bit quantisation without touching disk.
    pub fn quantize_u8(&self) -> Self {
        self.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
    }
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    if ax <= 1.0 {
        1.5 * ax.powi(3) - 2.5 * ax.powi(2) + 1.0
    } else if ax < 2.0 {
        -0.5 * ax.powi(3) + 2.5 * ax.powi(2) - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Half-sample symmetric boundary (`-1 -> 0`, `n -> n-1`).
pub fn symmetric_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Per-output-sample taps `(index, weight)` for resizing an axis of length
/// `in_len` to `out_len`. Downscaling widens the kernel (antialiasing), as
/// MATLAB `imresize` does.
pub fn resize_weights(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    let (kscale, width) = if scale < 1.0 { (scale, 4.0 / scale) } else { (1.0, 4.0) };
    (0..out_len)
        .map(|i| {
            let u = (i as f64 + 0.5) / scale - 0.5;
            let left = (u - width / 2.0).floor() as isize;
            let taps = width.ceil() as isize + 2;
            let mut raw: Vec<(isize, f64)> =
                (0..taps).map(|t| left + t).map(|j| (j, kscale * cubic(kscale * (u - j as f64)))).collect();
            let total: f64 = raw.iter().map(|(_, w)| w).sum();
            for (_, w) in raw.iter_mut() {
                *w /= total;
            }
            let mut merged: Vec<(usize, f64)> = Vec::new();
            for (j, w) in raw {
                if w == 0.0 {
                    continue;
                }
                let idx = symmetric_index(j, in_len);
                match merged.iter_mut().find(|(k, _)| *k == idx) {
                    Some(slot) => slot.1 += w,
                    None => merged.push((idx, w)),
                }
            }
            merged
        })
        .collect()
}

/// Separable bicubic resize to `out_h x out_w`.
pub fn bicubic_resize<S: Scalar>(img: &Image<S>, out_h: usize, out_w: usize) -> Image<S> {
    let (h, w) = img.dims();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let wy = resize_weights(h, out_h);
    let wx = resize_weights(w, out_w);
    let mut rows = vec![S::zero(); 3 * h * out_w];
    for c in 0..3 {
        for y in 0..h {
            for (x, taps) in wx.iter().enumerate() {
                let acc: f64 = taps.iter().map(|&(j, wt)| wt * img.get(c, y, j).as_f64()).sum();
                rows[(c * h + y) * out_w + x] = lit(acc);
            }
        }
    }
    Image::from_fn(out_h, out_w, |c, y, x| {
        let acc: f64 = wy[y].iter().map(|&(j, wt)| wt * rows[(c * h + j) * out_w + x].as_f64()).sum();
        lit(acc)
    })
}

/// Bicubic downscale by an integer factor (antialiased).
pub fn bicubic_downscale<S: Scalar>(img: &Image<S>, s: usize) -> Result<Image<S>> {
    if s == 0 || img.height() % s != 0 || img.width() % s != 0 {
        return Err(Error::Shape(format!("{}x{} not divisible by {s}", img.height(), img.width())));
    }
    Ok(bicubic_resize(img, img.height() / s, img.width() / s))
}

/// Bicubic upscale by an integer factor.
pub fn bicubic_upscale<S: Scalar>(img: &Image<S>, s: usize) -> Image<S> {
    bicubic_resize(img, img.height() * s, img.width() * s)
}

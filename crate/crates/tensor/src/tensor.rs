//! Dense row-major n-d arrays and the raw kernels the autodiff ops are built on.

use crate::scalar::{lit, Scalar};

/// A dense, contiguous, row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (i, &d) in shape.iter().enumerate().rev() {
        strides[i] = acc;
        acc *= d;
    }
    strides
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
        };
    }
    out
}

/// Strides of `shape` viewed inside the broadcast shape `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Walks every index of `shape`, calling `f` with the running offsets for each
/// stride set. The innermost axis is handed over as a run so callers can use
/// tight loops.
fn walk<const K: usize>(shape: &[usize], strides: [&[usize]; K], mut f: impl FnMut([usize; K], usize, [usize; K])) {
    if shape.is_empty() {
        f([0; K], 1, [0; K]);
        return;
    }
    if shape.contains(&0) {
        return;
    }
    let rank = shape.len();
    let inner = shape[rank - 1];
    let inner_strides: [usize; K] = std::array::from_fn(|k| strides[k][rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let mut offs = [0usize; K];
    loop {
        f(offs, inner, inner_strides);
        // odometer over the outer axes
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            for k in 0..K {
                offs[k] += strides[k][ax];
            }
            if idx[ax] < shape[ax] {
                break;
            }
            for k in 0..K {
                offs[k] -= strides[k][ax] * shape[ax];
            }
            idx[ax] = 0;
        }
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(numel(&shape), data.len(), "shape {shape:?} does not match {} elements", data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn scalar(v: S) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        Self { shape: shape.to_vec(), data: (0..numel(shape)).map(&mut f).collect() }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::new(shape.to_vec(), data.iter().map(|&v| lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| T::from_f64_lossy(v.as_f64())).collect() }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), self.data.len(), "cannot reshape {:?} to {shape:?}", self.shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise binary op with numpy broadcasting.
    pub fn zip_with(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Self { shape: self.shape.clone(), data };
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape);
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let so = contiguous_strides(&out_shape);
        let mut data = vec![S::zero(); numel(&out_shape)];
        walk(&out_shape, [&sa, &sb, &so], |[oa, ob, oo], n, [ia, ib, io]| {
            for j in 0..n {
                data[oo + j * io] = f(self.data[oa + j * ia], other.data[ob + j * ib]);
            }
        });
        Self { shape: out_shape, data }
    }

    /// Sums a broadcast result back down to `shape`.
    pub fn sum_to_shape(&self, shape: &[usize]) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        let st = broadcast_strides(shape, &self.shape);
        let ss = contiguous_strides(&self.shape);
        let mut data = vec![S::zero(); numel(shape)];
        walk(&self.shape, [&ss, &st], |[os, ot], n, [is, it]| {
            for j in 0..n {
                data[ot + j * it] += self.data[os + j * is];
            }
        });
        Self { shape: shape.to_vec(), data }
    }

    pub fn permute(&self, axes: &[usize]) -> Self {
        assert_eq!(axes.len(), self.rank(), "permute axes {axes:?} vs shape {:?}", self.shape);
        let src = contiguous_strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let gathered: Vec<usize> = axes.iter().map(|&a| src[a]).collect();
        let so = contiguous_strides(&out_shape);
        let mut data = vec![S::zero(); self.data.len()];
        walk(&out_shape, [&gathered, &so], |[os, oo], n, [is, io]| {
            for j in 0..n {
                data[oo + j * io] = self.data[os + j * is];
            }
        });
        Self { shape: out_shape, data }
    }

    pub fn sum_all(&self) -> S {
        self.data.iter().copied().sum()
    }

    /// Reduces `axis` with `f`, keeping it as a size-1 axis.
    fn reduce_axis(&self, axis: usize, init: S, f: impl Fn(S, S) -> S) -> Self {
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![init; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    let slot = &mut out[o * inner + i];
                    *slot = f(*slot, self.data[base + i]);
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Self { shape, data: out }
    }

    pub fn sum_axis(&self, axis: usize) -> Self {
        self.reduce_axis(axis, S::zero(), |a, b| a + b)
    }

    pub fn max_axis(&self, axis: usize) -> Self {
        self.reduce_axis(axis, S::neg_infinity(), |a, b| if b > a { b } else { a })
    }

    /// Batched matrix product over the last two axes.
    ///
    /// Batch axes must match, or one side may be a plain matrix shared across
    /// the batch. `trans_a` / `trans_b` read the operand transposed.
    pub fn matmul_ex(&self, other: &Self, trans_a: bool, trans_b: bool) -> Self {
        assert!(self.rank() >= 2 && other.rank() >= 2, "matmul needs rank >= 2");
        let (ar, ac) = (self.shape[self.rank() - 2], self.shape[self.rank() - 1]);
        let (br, bc) = (other.shape[other.rank() - 2], other.shape[other.rank() - 1]);
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dims differ: {:?} x {:?}", self.shape, other.shape);
        let a_batch = &self.shape[..self.rank() - 2];
        let b_batch = &other.shape[..other.rank() - 2];
        let batch_shape: Vec<usize> = if a_batch.is_empty() {
            b_batch.to_vec()
        } else if b_batch.is_empty() || a_batch == b_batch {
            a_batch.to_vec()
        } else {
            panic!("matmul batch dims differ: {:?} x {:?}", self.shape, other.shape)
        };
        let batch = numel(&batch_shape);
        let a_step = if a_batch.is_empty() { 0 } else { ar * ac };
        let b_step = if b_batch.is_empty() { 0 } else { br * bc };
        let a_str = if trans_a { (1, ac) } else { (ac, 1) };
        let b_str = if trans_b { (1, bc) } else { (bc, 1) };
        let mut out = vec![S::zero(); batch * m * n];
        // A shared left operand against a batched right one cannot be folded;
        // a shared right operand can be when the left is not transposed.
        if batch > 1 && b_step == 0 && !trans_a && a_step != 0 {
            S::gemm(batch * m, k, n, S::one(), &self.data, a_str, &other.data, b_str, S::zero(), &mut out, (n, 1));
        } else {
            for bi in 0..batch {
                S::gemm(
                    m,
                    k,
                    n,
                    S::one(),
                    &self.data[bi * a_step..],
                    a_str,
                    &other.data[bi * b_step..],
                    b_str,
                    S::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    (n, 1),
                );
            }
        }
        let mut shape = batch_shape;
        shape.push(m);
        shape.push(n);
        Self { shape, data: out }
    }

    pub fn matmul(&self, other: &Self) -> Self {
        self.matmul_ex(other, false, false)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).fold(0.0, f64::max)
    }

    /// Concatenate along `axis`.
    pub fn concat(parts: &[&Self], axis: usize) -> Self {
        let first = parts[0];
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        for p in parts {
            assert_eq!(p.rank(), first.rank());
            for (i, (&a, &b)) in p.shape.iter().zip(&first.shape).enumerate() {
                assert!(i == axis || a == b, "concat shape mismatch {:?} vs {:?}", p.shape, first.shape);
            }
        }
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Self { shape, data }
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Self {
        assert!(start + len <= self.shape[axis], "narrow out of range");
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&self.data[o * full + start * inner..o * full + (start + len) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Self { shape, data }
    }
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge
/// sample (`-1 -> 1`, `n -> n-2`). Repeats as needed for large offsets.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Zero-padded 2-D convolution (cross-correlation), stride 1, over NCHW input.
///
/// `groups` must be 1 or equal to the channel count (depthwise).
pub(crate) fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    pad: usize,
    groups: usize,
) -> Tensor<S> {
    let [n, cin, h, wd] = dims4(x.shape());
    let [cout, cin_g, kh, kw] = dims4(w.shape());
    assert!(h + 2 * pad + 1 > kh && wd + 2 * pad + 1 > kw, "kernel larger than padded input");
    let oh = h + 2 * pad + 1 - kh;
    let ow = wd + 2 * pad + 1 - kw;
    let mut out = vec![S::zero(); n * cout * oh * ow];
    if groups == 1 {
        assert_eq!(cin_g, cin, "conv weight expects {cin_g} input channels, got {cin}");
        let kdim = cin * kh * kw;
        let mut cols = vec![S::zero(); kdim * oh * ow];
        for b in 0..n {
            im2col(&x.data()[b * cin * h * wd..(b + 1) * cin * h * wd], cin, h, wd, kh, kw, pad, &mut cols);
            S::gemm(
                cout,
                kdim,
                oh * ow,
                S::one(),
                w.data(),
                (kdim, 1),
                &cols,
                (oh * ow, 1),
                S::zero(),
                &mut out[b * cout * oh * ow..(b + 1) * cout * oh * ow],
                (oh * ow, 1),
            );
        }
    } else {
        assert!(groups == cin && cout == cin && cin_g == 1, "only depthwise grouped convolution is supported");
        for b in 0..n {
            for c in 0..cin {
                let src = &x.data()[(b * cin + c) * h * wd..(b * cin + c + 1) * h * wd];
                let ker = &w.data()[c * kh * kw..(c + 1) * kh * kw];
                let dst = &mut out[(b * cout + c) * oh * ow..(b * cout + c + 1) * oh * ow];
                for oy in 0..oh {
                    for ky in 0..kh {
                        let iy = oy as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * wd..(iy as usize + 1) * wd];
                        for kx in 0..kw {
                            let kv = ker[ky * kw + kx];
                            let (lo, hi) = valid_range(ow, kx, pad, wd);
                            for ox in lo..hi {
                                dst[oy * ow + ox] += kv * row[ox + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(bias) = bias {
        for b in 0..n {
            for c in 0..cout {
                let bv = bias.data()[c];
                for v in &mut out[(b * cout + c) * oh * ow..(b * cout + c + 1) * oh * ow] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out)
}

/// Output columns `ox` for which `ox + kx - pad` lands inside `0..width`.
fn valid_range(ow: usize, kx: usize, pad: usize, width: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (width + pad).saturating_sub(kx).min(ow);
    (lo, hi.max(lo))
}

pub(crate) fn dims4(s: &[usize]) -> [usize; 4] {
    assert_eq!(s.len(), 4, "expected NCHW tensor, got shape {s:?}");
    [s[0], s[1], s[2], s[3]]
}

#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(x: &[S], cin: usize, h: usize, w: usize, kh: usize, kw: usize, pad: usize, cols: &mut [S]) {
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * oh * ow;
                let (lo, hi) = valid_range(ow, kx, pad, w);
                for oy in 0..oh {
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(S::zero());
                        continue;
                    }
                    let src = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    dst[..lo].fill(S::zero());
                    for ox in lo..hi {
                        dst[ox] = src[ox + kx - pad];
                    }
                    dst[hi..].fill(S::zero());
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(cols: &[S], cin: usize, h: usize, w: usize, kh: usize, kw: usize, pad: usize, dx: &mut [S]) {
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * oh * ow;
                let (lo, hi) = valid_range(ow, kx, pad, w);
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for ox in lo..hi {
                        dx[base + ox + kx - pad] += cols[row + oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub(crate) fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
    pad: usize,
    groups: usize,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let [n, cin, h, wd] = dims4(x.shape());
    let [cout, _, kh, kw] = dims4(w.shape());
    let [_, _, oh, ow] = dims4(dy.shape());
    let mut dx = vec![S::zero(); x.len()];
    let mut dw = vec![S::zero(); w.len()];
    let mut db = vec![S::zero(); cout];
    for b in 0..n {
        for c in 0..cout {
            db[c] += dy.data()[(b * cout + c) * oh * ow..(b * cout + c + 1) * oh * ow].iter().copied().sum();
        }
    }
    if groups == 1 {
        let kdim = cin * kh * kw;
        let mut cols = vec![S::zero(); kdim * oh * ow];
        let mut dcols = vec![S::zero(); kdim * oh * ow];
        for b in 0..n {
            let dyb = &dy.data()[b * cout * oh * ow..(b + 1) * cout * oh * ow];
            im2col(&x.data()[b * cin * h * wd..(b + 1) * cin * h * wd], cin, h, wd, kh, kw, pad, &mut cols);
            // dW += dY * cols^T
            S::gemm(cout, oh * ow, kdim, S::one(), dyb, (oh * ow, 1), &cols, (1, oh * ow), S::one(), &mut dw, (kdim, 1));
            // dcols = W^T * dY
            S::gemm(kdim, cout, oh * ow, S::one(), w.data(), (1, kdim), dyb, (oh * ow, 1), S::zero(), &mut dcols, (oh * ow, 1));
            col2im(&dcols, cin, h, wd, kh, kw, pad, &mut dx[b * cin * h * wd..(b + 1) * cin * h * wd]);
        }
    } else {
        for b in 0..n {
            for c in 0..cin {
                let src = &x.data()[(b * cin + c) * h * wd..(b * cin + c + 1) * h * wd];
                let g = &dy.data()[(b * cout + c) * oh * ow..(b * cout + c + 1) * oh * ow];
                let ker = &w.data()[c * kh * kw..(c + 1) * kh * kw];
                let dxs = &mut dx[(b * cin + c) * h * wd..(b * cin + c + 1) * h * wd];
                for oy in 0..oh {
                    for ky in 0..kh {
                        let iy = oy as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for kx in 0..kw {
                            let (lo, hi) = valid_range(ow, kx, pad, wd);
                            let mut acc = S::zero();
                            let kv = ker[ky * kw + kx];
                            for ox in lo..hi {
                                let gv = g[oy * ow + ox];
                                acc += gv * src[iy * wd + ox + kx - pad];
                                dxs[iy * wd + ox + kx - pad] += gv * kv;
                            }
                            dw[(c * kh + ky) * kw + kx] += acc;
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx),
        Tensor::new(w.shape().to_vec(), dw),
        Tensor::new(vec![cout], db),
    )
}

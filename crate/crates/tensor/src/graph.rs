//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`]s. Calling
//! [`Tape::backward`] on a scalar result walks the record in reverse and
//! produces gradients for every node that requires them. Nodes whose inputs
//! are all constants never store a backward closure, so constant subgraphs
//! (frozen weights, inference) cost nothing extra.

use std::cell::RefCell;
use std::rc::Rc;

use crate::scalar::{lit, Scalar};
use crate::tensor::{conv2d_backward, conv2d_forward, dims4, reflect_index, Tensor};

type Backward<S> = Box<dyn Fn(&Tensor<S>) -> Vec<Option<Tensor<S>>>>;

struct Node<S: Scalar> {
    value: Rc<Tensor<S>>,
    parents: Vec<usize>,
    backward: Option<Backward<S>>,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub(crate) fn take_id(&mut self, id: usize) -> Option<Tensor<S>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, value: Tensor<S>, parents: Vec<usize>, backward: Option<Backward<S>>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), parents, backward, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push_node(value, Vec::new(), None, false)
    }

    /// A leaf that receives gradients.
    pub fn leaf(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push_node(value, Vec::new(), None, true)
    }

    fn op<'t>(
        &'t self,
        value: Tensor<S>,
        parents: &[Var<'t, S>],
        backward: impl Fn(&Tensor<S>) -> Vec<Option<Tensor<S>>> + 'static,
    ) -> Var<'t, S> {
        let requires = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        if requires {
            let ids = parents.iter().map(|p| p.id).collect();
            self.push_node(value, ids, Some(Box::new(backward)), true)
        } else {
            self.push_node(value, Vec::new(), None, false)
        }
    }

    /// Reverse pass from a scalar `root`, seeded with gradient 1.
    pub fn backward(&self, root: Var<'_, S>) -> Gradients<S> {
        let seed = Tensor::ones(root.value().shape());
        self.backward_with(root, seed)
    }

    pub fn backward_with(&self, root: Var<'_, S>, seed: Tensor<S>) -> Gradients<S> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(seed.shape(), nodes[root.id].value.shape(), "seed shape must match root");
        grads[root.id] = Some(seed);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape(), "gradient shape mismatch");
                match &mut grads[pid] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += *b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
            // Interior gradients are not needed after propagation; keep leaves.
            if !node.parents.is_empty() {
                grads[id] = None;
            } else {
                grads[id] = Some(g);
            }
        }
        Gradients { grads }
    }
}

fn unbroadcast<S: Scalar>(g: &Tensor<S>, shape: &[usize]) -> Tensor<S> {
    g.sum_to_shape(shape)
}

fn invert_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<S>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, value: Tensor<S>, grad: impl Fn(&Tensor<S>) -> Tensor<S> + 'static) -> Self {
        self.tape.op(value, &[self], move |g| vec![Some(grad(g))])
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(self, rhs: Self) -> Self {
        let (a, b) = (self.value(), rhs.value());
        let out = a.zip_with(&b, |x, y| x + y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.op(out, &[self, rhs], move |g| vec![Some(unbroadcast(g, &sa)), Some(unbroadcast(g, &sb))])
    }

    pub fn sub(self, rhs: Self) -> Self {
        let (a, b) = (self.value(), rhs.value());
        let out = a.zip_with(&b, |x, y| x - y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.op(out, &[self, rhs], move |g| {
            vec![Some(unbroadcast(g, &sa)), Some(unbroadcast(&g.map(|v| -v), &sb))]
        })
    }

    pub fn mul(self, rhs: Self) -> Self {
        let (a, b) = (self.value(), rhs.value());
        let out = a.zip_with(&b, |x, y| x * y);
        self.tape.op(out, &[self, rhs], move |g| {
            let ga = g.zip_with(&b, |x, y| x * y);
            let gb = g.zip_with(&a, |x, y| x * y);
            vec![Some(unbroadcast(&ga, a.shape())), Some(unbroadcast(&gb, b.shape()))]
        })
    }

    pub fn div(self, rhs: Self) -> Self {
        let (a, b) = (self.value(), rhs.value());
        let out = a.zip_with(&b, |x, y| x / y);
        let q = Rc::new(out.clone());
        self.tape.op(out, &[self, rhs], move |g| {
            let ga = g.zip_with(&b, |x, y| x / y);
            // d(a/b)/db = -(a/b)/b
            let gb = g.zip_with(&q, |x, y| -x * y).zip_with(&b, |x, y| x / y);
            vec![Some(unbroadcast(&ga, a.shape())), Some(unbroadcast(&gb, b.shape()))]
        })
    }

    pub fn neg(self) -> Self {
        self.mul_scalar(-S::one())
    }

    pub fn mul_scalar(self, k: S) -> Self {
        let out = self.value().map(|v| v * k);
        self.unary(out, move |g| g.map(|v| v * k))
    }

    pub fn add_scalar(self, k: S) -> Self {
        let out = self.value().map(|v| v + k);
        self.unary(out, |g| g.clone())
    }

    pub fn exp(self) -> Self {
        let out = self.value().map(|v| v.exp());
        let y = Rc::new(out.clone());
        self.unary(out, move |g| g.zip_with(&y, |a, b| a * b))
    }

    pub fn ln(self) -> Self {
        let x = self.value();
        let out = x.map(|v| v.ln());
        self.unary(out, move |g| g.zip_with(&x, |a, b| a / b))
    }

    pub fn sqrt(self) -> Self {
        let out = self.value().map(|v| v.sqrt());
        let y = Rc::new(out.clone());
        let half = lit::<S>(0.5);
        self.unary(out, move |g| g.zip_with(&y, |a, b| a * half / b))
    }

    pub fn square(self) -> Self {
        let x = self.value();
        let out = x.map(|v| v * v);
        let two = lit::<S>(2.0);
        self.unary(out, move |g| g.zip_with(&x, |a, b| a * two * b))
    }

    pub fn abs(self) -> Self {
        let x = self.value();
        let out = x.map(|v| v.abs());
        self.unary(out, move |g| {
            g.zip_with(&x, |a, b| {
                if b > S::zero() {
                    a
                } else if b < S::zero() {
                    -a
                } else {
                    S::zero()
                }
            })
        })
    }

    pub fn sigmoid(self) -> Self {
        let out = self.value().map(|v| S::one() / (S::one() + (-v).exp()));
        let y = Rc::new(out.clone());
        self.unary(out, move |g| g.zip_with(&y, |a, s| a * s * (S::one() - s)))
    }

    pub fn leaky_relu(self, slope: S) -> Self {
        let x = self.value();
        let out = x.map(|v| if v > S::zero() { v } else { v * slope });
        self.unary(out, move |g| g.zip_with(&x, |a, b| if b > S::zero() { a } else { a * slope }))
    }

    pub fn relu(self) -> Self {
        self.leaky_relu(S::zero())
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Self {
        let x = self.value();
        let c = lit::<S>((2.0 / std::f64::consts::PI).sqrt());
        let k = lit::<S>(0.044715);
        let half = lit::<S>(0.5);
        let three = lit::<S>(3.0);
        let out = x.map(|v| half * v * (S::one() + (c * (v + k * v * v * v)).tanh()));
        self.unary(out, move |g| {
            g.zip_with(&x, |a, v| {
                let u = c * (v + k * v * v * v);
                let t = u.tanh();
                let du = c * (S::one() + three * k * v * v);
                a * (half * (S::one() + t) + half * v * (S::one() - t * t) * du)
            })
        })
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum_all(self) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum_all());
        self.unary(out, move |g| Tensor::full(&shape, g.item()))
    }

    pub fn mean_all(self) -> Self {
        let n = self.value().len();
        self.sum_all().mul_scalar(S::one() / lit(n as f64))
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(self, axis: usize) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = x.sum_axis(axis);
        self.unary(out, move |g| Tensor::zeros(&shape).zip_with(g, |_, b| b))
    }

    pub fn mean_axis(self, axis: usize) -> Self {
        let n = self.shape()[axis];
        self.sum_axis(axis).mul_scalar(S::one() / lit(n as f64))
    }

    /// Max over `axis`, keeping it with size 1. Ties route the gradient to the
    /// first maximal element.
    pub fn max_axis(self, axis: usize) -> Self {
        let x = self.value();
        let out = x.max_axis(axis);
        let m = Rc::new(out.clone());
        self.unary(out, move |g| {
            let shape = x.shape();
            let outer: usize = shape[..axis].iter().product();
            let len = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut dx = Tensor::zeros(shape);
            for o in 0..outer {
                for i in 0..inner {
                    let target = m.data()[o * inner + i];
                    for a in 0..len {
                        let idx = (o * len + a) * inner + i;
                        if x.data()[idx] == target {
                            dx.data_mut()[idx] = g.data()[o * inner + i];
                            break;
                        }
                    }
                }
            }
            dx
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Self {
        let x = self.value();
        let n = *x.shape().last().expect("softmax on scalar");
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(n) {
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let y = Rc::new(out.clone());
        self.unary(out, move |g| {
            let mut dx = (*y).clone();
            for (dr, gr) in dx.data_mut().chunks_mut(n).zip(g.data().chunks(n)) {
                let dot: S = dr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for (d, &gv) in dr.iter_mut().zip(gr) {
                    *d = *d * (gv - dot);
                }
            }
            dx
        })
    }

    /// Normalise over axis 1 (channels) without affine parameters.
    pub fn layer_norm_channels(self, eps: S) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        let outer = shape[0];
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let cs = lit::<S>(c as f64);
        let mut y = Tensor::zeros(&shape);
        let mut inv_std = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |ch: usize| (o * c + ch) * inner + i;
                let mean = (0..c).map(|ch| x.data()[at(ch)]).sum::<S>() / cs;
                let var = (0..c).map(|ch| (x.data()[at(ch)] - mean).powi(2)).sum::<S>() / cs;
                let r = S::one() / (var + eps).sqrt();
                inv_std[o * inner + i] = r;
                for ch in 0..c {
                    y.data_mut()[at(ch)] = (x.data()[at(ch)] - mean) * r;
                }
            }
        }
        let yr = Rc::new(y.clone());
        self.unary(y, move |g| {
            let mut dx = Tensor::zeros(&shape);
            for o in 0..outer {
                for i in 0..inner {
                    let at = |ch: usize| (o * c + ch) * inner + i;
                    let mg = (0..c).map(|ch| g.data()[at(ch)]).sum::<S>() / cs;
                    let mgy = (0..c).map(|ch| g.data()[at(ch)] * yr.data()[at(ch)]).sum::<S>() / cs;
                    let r = inv_std[o * inner + i];
                    for ch in 0..c {
                        dx.data_mut()[at(ch)] = r * (g.data()[at(ch)] - mg - yr.data()[at(ch)] * mgy);
                    }
                }
            }
            dx
        })
    }

    // ---- shape -------------------------------------------------------------

    pub fn reshape(self, shape: &[usize]) -> Self {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshape(shape);
        self.unary(out, move |g| g.clone().reshape(&old))
    }

    pub fn permute(self, axes: &[usize]) -> Self {
        let out = self.value().permute(axes);
        let inv = invert_axes(axes);
        self.unary(out, move |g| g.permute(&inv))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = x.narrow(axis, start, len);
        self.unary(out, move |g| {
            let before = {
                let mut s = shape.clone();
                s[axis] = start;
                Tensor::zeros(&s)
            };
            let after = {
                let mut s = shape.clone();
                s[axis] = shape[axis] - start - len;
                Tensor::zeros(&s)
            };
            Tensor::concat(&[&before, g, &after], axis)
        })
    }

    pub fn concat(parts: &[Self], axis: usize) -> Self {
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<S>> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat(&refs, axis);
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        tape.op(out, parts, move |g| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&n| {
                    let piece = g.narrow(axis, start, n);
                    start += n;
                    Some(piece)
                })
                .collect()
        })
    }

    /// Batched matrix product over the last two axes; see [`Tensor::matmul_ex`].
    pub fn matmul(self, rhs: Self) -> Self {
        self.matmul_ex(rhs, false, false)
    }

    pub fn matmul_ex(self, rhs: Self, trans_a: bool, trans_b: bool) -> Self {
        let (a, b) = (self.value(), rhs.value());
        let out = a.matmul_ex(&b, trans_a, trans_b);
        self.tape.op(out, &[self, rhs], move |g| {
            // With C = op(A) op(B): d op(A) = G op(B)^T, d op(B) = op(A)^T G.
            let da = if trans_a { b.matmul_ex(g, trans_b, true) } else { g.matmul_ex(&b, false, !trans_b) };
            let db = if trans_b { g.matmul_ex(&a, true, trans_a) } else { a.matmul_ex(g, !trans_a, false) };
            vec![Some(reduce_batch(da, a.shape())), Some(reduce_batch(db, b.shape()))]
        })
    }

    // ---- image ops ---------------------------------------------------------

    /// Zero-padded stride-1 convolution over NCHW input; `groups` is 1 or the
    /// channel count.
    pub fn conv2d(self, weight: Self, bias: Option<Self>, pad: usize, groups: usize) -> Self {
        let x = self.value();
        let w = weight.value();
        let bv = bias.map(|b| b.value());
        let out = conv2d_forward(&x, &w, bv.as_deref(), pad, groups);
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        self.tape.op(out, &parents, move |g| {
            let (dx, dw, db) = conv2d_backward(&x, &w, g, pad, groups);
            let mut v = vec![Some(dx), Some(dw)];
            if has_bias {
                v.push(Some(db));
            }
            v
        })
    }

    /// Reflect-pad the two spatial axes of an NCHW tensor (bottom/right only).
    pub fn pad_reflect(self, bottom: usize, right: usize) -> Self {
        if bottom == 0 && right == 0 {
            return self;
        }
        let x = self.value();
        let [n, c, h, w] = dims4(x.shape());
        let (oh, ow) = (h + bottom, w + right);
        let map_y: Vec<usize> = (0..oh).map(|y| reflect_index(y as isize, h)).collect();
        let map_x: Vec<usize> = (0..ow).map(|x| reflect_index(x as isize, w)).collect();
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out.data_mut()[(p * oh + y) * ow + xx] = x.data()[(p * h + map_y[y]) * w + map_x[xx]];
                }
            }
        }
        self.unary(out, move |g| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            for p in 0..n * c {
                for y in 0..oh {
                    for xx in 0..ow {
                        dx.data_mut()[(p * h + map_y[y]) * w + map_x[xx]] += g.data()[(p * oh + y) * ow + xx];
                    }
                }
            }
            dx
        })
    }

    /// Crop the spatial axes of an NCHW tensor to the top-left `h x w` block.
    pub fn crop(self, h: usize, w: usize) -> Self {
        let shape = self.shape();
        let mut v = self;
        if shape[2] != h {
            v = v.narrow(2, 0, h);
        }
        if shape[3] != w {
            v = v.narrow(3, 0, w);
        }
        v
    }

    /// `[N, C*r*r, H, W] -> [N, C, H*r, W*r]`.
    pub fn pixel_shuffle(self, r: usize) -> Self {
        let [n, crr, h, w] = dims4(&self.shape());
        assert_eq!(crr % (r * r), 0, "pixel_shuffle: channels {crr} not divisible by {}", r * r);
        let c = crr / (r * r);
        self.reshape(&[n, c, r, r, h, w]).permute(&[0, 1, 4, 2, 5, 3]).reshape(&[n, c, h * r, w * r])
    }

    /// `[N, C, H*r, W*r] -> [N, C*r*r, H, W]`; inverse of [`Var::pixel_shuffle`].
    pub fn pixel_unshuffle(self, r: usize) -> Self {
        let [n, c, hr, wr] = dims4(&self.shape());
        assert!(hr % r == 0 && wr % r == 0, "pixel_unshuffle: {hr}x{wr} not divisible by {r}");
        let (h, w) = (hr / r, wr / r);
        self.reshape(&[n, c, h, r, w, r]).permute(&[0, 1, 3, 5, 2, 4]).reshape(&[n, c * r * r, h, w])
    }
}

/// Sum leading batch axes of a gradient when the forward operand was shared.
fn reduce_batch<S: Scalar>(g: Tensor<S>, shape: &[usize]) -> Tensor<S> {
    if g.shape() == shape {
        return g;
    }
    let rows = shape[shape.len() - 2];
    let cols = shape[shape.len() - 1];
    let mut out = Tensor::zeros(shape);
    for chunk in g.data().chunks(rows * cols) {
        for (o, &v) in out.data_mut().iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

macro_rules! bin_op {
    ($tr:ident, $m:ident) => {
        impl<'t, S: Scalar> std::ops::$tr for Var<'t, S> {
            type Output = Var<'t, S>;
            fn $m(self, rhs: Self) -> Self::Output {
                Var::$m(self, rhs)
            }
        }
    };
}
bin_op!(Add, add);
bin_op!(Sub, sub);
bin_op!(Mul, mul);
bin_op!(Div, div);

impl<'t, S: Scalar> std::ops::Neg for Var<'t, S> {
    type Output = Var<'t, S>;
    fn neg(self) -> Self::Output {
        Var::neg(self)
    }
}

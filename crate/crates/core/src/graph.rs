//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and whatever the adjoint needs. [`Graph::backward`] walks the tape once in
//! reverse. Nodes that do not depend on a trainable leaf are never
//! differentiated, which keeps frozen sub-networks and constant inputs cheap.

use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::{col2im, conv_forward_cols, group_norm_backward, group_norm_forward, im2col, ConvGeom};
use crate::real::{matmul, Layout, Real};
use crate::render::{self, Camera, Light, Map, Pose, RasterCache, RenderError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower bound of `Activation::Scale`. An exactly reproduced pixel would
/// otherwise pull its scale to zero, where the log term is unbounded.
pub const SCALE_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    /// `ln(1 + e^x)` with beta 1, linear above 20.
    Softplus,
    /// Softplus held at or above `SCALE_FLOOR`, for predicted scales.
    Scale,
    Sigmoid,
    /// `x * sigmoid(x)`.
    Swish,
}

impl Activation {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu(s) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::lit(s)
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Softplus => {
                if x > T::lit(20.0) {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
            Activation::Scale => Activation::Softplus.apply(x).max(T::lit(SCALE_FLOOR)),
            Activation::Sigmoid => sigmoid(x),
            Activation::Swish => x * sigmoid(x),
        }
    }

    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(s) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::lit(s)
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Softplus => {
                if x > T::lit(20.0) {
                    T::one()
                } else {
                    sigmoid(x)
                }
            }
            Activation::Scale => {
                if Activation::Softplus.apply(x) < T::lit(SCALE_FLOOR) {
                    T::zero()
                } else {
                    Activation::Softplus.derivative(x, y)
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            }
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphError {
    /// A confidence-weighted loss was asked to average over an empty mask.
    EmptyMask,
    /// A confidence map contained a non-positive scale.
    NonPositiveScale,
    Render(RenderError),
}

impl core::fmt::Display for GraphError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            GraphError::EmptyMask => f.write_str("empty mask in confidence loss"),
            GraphError::NonPositiveScale => f.write_str("non-positive confidence scale"),
            GraphError::Render(e) => write!(f, "render failed: {e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for GraphError {}

impl From<RenderError> for GraphError {
    fn from(e: RenderError) -> Self {
        GraphError::Render(e)
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    ColAffine(Var, Vec<T>),
    Act(Var, Activation),
    Abs(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cout: usize, cols: Vec<T> },
    ConvT2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cin: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<T>, rstd: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Concat(Vec<Var>),
    Reshape(Var),
    SliceChannels { x: Var, start: usize },
    HFlip(Var),
    Render(alloc::boxed::Box<RenderNode<T>>),
    ConfLoss { pred: Var, target: Var, sigma: Var, mask: Option<Vec<bool>>, scale: Vec<T> },
    WeightedSqErr { pred: Var, target: Var, weights: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Mean(Var),
}

struct RenderNode<T> {
    albedo: Var,
    depth: Var,
    pose: Var,
    light: Var,
    cam: Camera<T>,
    caches: Vec<RasterCache<T>>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass, indexed by [`Var`]. Only leaves are kept.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::from_vec(va.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let t = Tensor::from_vec(va.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::from_vec(va.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let t = self.value(x).map(|v| v * scale + shift);
        let ng = self.ng(x);
        self.push(t, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    /// Per-column affine map over the last axis of a `[N, D]` tensor.
    pub fn col_affine(&mut self, x: Var, scale: &[T], shift: &[T]) -> Var {
        let v = self.value(x);
        let d = *v.shape().last().expect("col_affine on scalar");
        assert!(scale.len() == d && shift.len() == d);
        let data = v.data().iter().enumerate().map(|(i, &e)| e * scale[i % d] + shift[i % d]).collect();
        let t = Tensor::from_vec(v.shape(), data);
        let ng = self.ng(x);
        self.push(t, Op::ColAffine(x, scale.to_vec()), ng)
    }

    pub fn act(&mut self, x: Var, a: Activation) -> Var {
        let t = self.value(x).map(|v| a.apply(v));
        let ng = self.ng(x);
        self.push(t, Op::Act(x, a), ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.abs());
        let ng = self.ng(x);
        self.push(t, Op::Abs(x), ng)
    }

    /// `x: [N, Cin, H, W]`, `w: [Cout, Cin, k, k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws[1], xs[1], "conv2d channel mismatch");
        let (n, cout, k) = (xs[0], ws[0], ws[2]);
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], k, stride, pad);
        let (kk, pp) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::zero(); n * kk * pp];
        let mut out = vec![T::zero(); n * cout * pp];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for s in 0..n {
                let c = &mut cols[s * kk * pp..(s + 1) * kk * pp];
                im2col(&xv[s * geom.in_len()..(s + 1) * geom.in_len()], &geom, c);
                conv_forward_cols(wv, bv, c, cout, &geom, &mut out[s * cout * pp..(s + 1) * cout * pp]);
            }
        }
        let t = Tensor::from_vec(&[n, cout, geom.out_height, geom.out_width], out);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(t, Op::Conv2d { x, w, b, geom, cout, cols }, ng)
    }

    /// Transposed convolution, `w: [Cin, Cout, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv_transpose2d input must be NCHW");
        assert_eq!(ws[0], xs[1], "conv_transpose2d channel mismatch");
        let (n, cin, cout, k) = (xs[0], xs[1], ws[1], ws[2]);
        let ho = (xs[2] - 1) * stride + k - 2 * pad;
        let wo = (xs[3] - 1) * stride + k - 2 * pad;
        let geom = ConvGeom::new(cout, ho, wo, k, stride, pad);
        assert_eq!((geom.out_height, geom.out_width), (xs[2], xs[3]));
        let (kk, pp) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![T::zero(); n * geom.in_len()];
        let mut cols = vec![T::zero(); kk * pp];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for s in 0..n {
                matmul(kk, cin, pp, wv, Layout::T, &xv[s * cin * pp..(s + 1) * cin * pp], Layout::N, T::one(), T::zero(), &mut cols);
                let o = &mut out[s * geom.in_len()..(s + 1) * geom.in_len()];
                col2im(&cols, &geom, o);
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for (c, &bb) in bv.iter().enumerate() {
                        for v in &mut o[c * ho * wo..(c + 1) * ho * wo] {
                            *v += bb;
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[n, cout, ho, wo], out);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(t, Op::ConvT2d { x, w, b, geom, cin }, ng)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        assert_eq!(c % groups, 0, "channels not divisible by groups");
        let spatial: usize = xs[2..].iter().product();
        let per = c * spatial;
        let mut out = vec![T::zero(); n * per];
        let mut xhat = vec![T::zero(); n * per];
        let mut rstd = vec![T::zero(); n * groups];
        {
            let xv = self.value(x).data();
            let gv = self.value(gamma).data();
            let bv = self.value(beta).data();
            for s in 0..n {
                group_norm_forward(
                    &xv[s * per..(s + 1) * per],
                    c,
                    spatial,
                    groups,
                    gv,
                    bv,
                    T::lit(1e-5),
                    &mut out[s * per..(s + 1) * per],
                    &mut xhat[s * per..(s + 1) * per],
                    &mut rstd[s * groups..(s + 1) * groups],
                );
            }
        }
        let t = Tensor::from_vec(&xs, out);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(t, Op::GroupNorm { x, gamma, beta, groups, xhat, rstd }, ng)
    }

    /// Training-mode batch normalization of `[N, D]` over the batch axis.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, d) = (xs[0], xs[1]);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let inv_n = T::one() / T::lit(n as f64);
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); d];
        let mut out = vec![T::zero(); n * d];
        for j in 0..d {
            let mean = (0..n).map(|i| xv[i * d + j]).sum::<T>() * inv_n;
            let var = (0..n).map(|i| (xv[i * d + j] - mean) * (xv[i * d + j] - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[j] = rs;
            for i in 0..n {
                let xh = (xv[i * d + j] - mean) * rs;
                xhat[i * d + j] = xh;
                out[i * d + j] = xh * gv[j] + bv[j];
            }
        }
        let t = Tensor::from_vec(&xs, out);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(t, Op::BatchNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]` → `x wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2, "linear input must be [N, in]");
        assert_eq!(xs[1], ws[1], "linear width mismatch");
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * dout];
        matmul(n, din, dout, self.value(x).data(), Layout::N, self.value(w).data(), Layout::T, T::one(), T::zero(), &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(dout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let t = Tensor::from_vec(&[n, dout], out);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(t, Op::Linear { x, w, b }, ng)
    }

    /// Concatenation along axis 1 of tensors sharing every other axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let n = first[0];
        let mut shape = first.clone();
        shape[1] = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let total: usize = shape.iter().product();
        let mut out = Vec::with_capacity(total);
        for s in 0..n {
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.shape()[0], n);
                assert_eq!(&v.shape()[2..], &first[2..]);
                let inner = v.len() / n;
                out.extend_from_slice(&v.data()[s * inner..(s + 1) * inner]);
            }
        }
        let t = Tensor::from_vec(&shape, out);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(t, Op::Concat(parts.to_vec()), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    /// Channels `[start, start + len)` of an `[N, C, ...]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        assert!(start + len <= c);
        let spatial: usize = xs[2..].iter().product();
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * spatial);
        for s in 0..n {
            let base = (s * c + start) * spatial;
            out.extend_from_slice(&v[base..base + len * spatial]);
        }
        let mut shape = xs.clone();
        shape[1] = len;
        let t = Tensor::from_vec(&shape, out);
        let ng = self.ng(x);
        self.push(t, Op::SliceChannels { x, start }, ng)
    }

    /// Reverses the last axis.
    pub fn hflip(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let w = *v.shape().last().unwrap();
        let mut out = vec![T::zero(); v.len()];
        render::hflip_planes(v.data(), w, &mut out);
        let t = Tensor::from_vec(v.shape(), out);
        let ng = self.ng(x);
        self.push(t, Op::HFlip(x), ng)
    }

    /// Batched differentiable render. `albedo: [N,3,H,W]`, `depth: [N,1,H,W]`,
    /// `pose: [N,6]`, `light: [N,4]` (already mapped to physical ranges).
    /// Returns the image node and the per-sample coverage masks.
    pub fn render(&mut self, albedo: Var, depth: Var, pose: Var, light: Var, cam: Camera<T>) -> Result<(Var, Vec<bool>), GraphError> {
        let a_s = self.shape(albedo).to_vec();
        let (n, c, h, w) = (a_s[0], a_s[1], a_s[2], a_s[3]);
        let mut image = Vec::with_capacity(n * c * h * w);
        let mut masks = Vec::with_capacity(n * h * w);
        let mut caches = Vec::with_capacity(n);
        for s in 0..n {
            let (am, dm, p, l) = self.render_inputs(albedo, depth, pose, light, s);
            let (out, cache) = render::render_with_cache(&am, &dm, &p, &l, &cam)?;
            image.extend_from_slice(&out.image.data);
            masks.extend_from_slice(&out.mask);
            caches.push(cache);
        }
        let t = Tensor::from_vec(&[n, c, h, w], image);
        let ng = self.ng(albedo) || self.ng(depth) || self.ng(pose) || self.ng(light);
        let node = RenderNode { albedo, depth, pose, light, cam, caches };
        let v = self.push(t, Op::Render(alloc::boxed::Box::new(node)), ng);
        Ok((v, masks))
    }

    fn render_inputs(&self, albedo: Var, depth: Var, pose: Var, light: Var, s: usize) -> (Map<T>, Map<T>, Pose<T>, Light<T>) {
        let a = self.value(albedo);
        let (c, h, w) = (a.dim(1), a.dim(2), a.dim(3));
        let am = Map::new(c, h, w, a.data()[s * c * h * w..(s + 1) * c * h * w].to_vec());
        let d = self.value(depth);
        let dm = Map::new(1, h, w, d.data()[s * h * w..(s + 1) * h * w].to_vec());
        let pv = &self.value(pose).data()[s * 6..(s + 1) * 6];
        let lv = &self.value(light).data()[s * 4..(s + 1) * 4];
        let p = Pose::from_array([pv[0], pv[1], pv[2], pv[3], pv[4], pv[5]]);
        let l = Light::from_array([lv[0], lv[1], lv[2], lv[3]]);
        (am, dm, p, l)
    }

    /// Confidence-calibrated Laplacian reconstruction loss, averaged over the
    /// batch. Per sample it is the mean over masked entries of
    /// `ln(√2 σ) + √2 |pred − target| / σ`; `sigma` is `[N,1,H,W]` and is
    /// shared across channels. `mask` is row-major `N×H×W`, `None` = all.
    pub fn conf_loss(&mut self, pred: Var, target: Var, sigma: Var, mask: Option<&[bool]>) -> Result<Var, GraphError> {
        let ps = self.shape(pred).to_vec();
        assert_eq!(self.shape(target), &ps[..], "conf_loss target shape");
        let (n, c) = (ps[0], ps[1]);
        let sp: usize = ps[2..].iter().product();
        assert_eq!(self.value(sigma).len(), n * sp, "conf_loss sigma must be [N,1,H,W]");
        if let Some(m) = mask {
            assert_eq!(m.len(), n * sp);
        }
        let pv = self.value(pred).data();
        let tv = self.value(target).data();
        let sv = self.value(sigma).data();
        if sv.iter().any(|&s| !(s > T::zero())) {
            return Err(GraphError::NonPositiveScale);
        }
        let sqrt2 = T::SQRT_2();
        let mut total = T::zero();
        let mut scale = Vec::with_capacity(n);
        for s in 0..n {
            let count = match mask {
                Some(m) => m[s * sp..(s + 1) * sp].iter().filter(|&&b| b).count(),
                None => sp,
            };
            if count == 0 {
                return Err(GraphError::EmptyMask);
            }
            let norm = T::one() / T::lit((count * c * n) as f64);
            scale.push(norm);
            let mut acc = T::zero();
            for p in 0..sp {
                if mask.is_some_and(|m| !m[s * sp + p]) {
                    continue;
                }
                let sg = sv[s * sp + p];
                let log_term = (sqrt2 * sg).ln();
                for ch in 0..c {
                    let idx = (s * c + ch) * sp + p;
                    acc += log_term + sqrt2 * (pv[idx] - tv[idx]).abs() / sg;
                }
            }
            total += acc * norm;
        }
        let ng = self.ng(pred) || self.ng(target) || self.ng(sigma);
        let op = Op::ConfLoss { pred, target, sigma, mask: mask.map(|m| m.to_vec()), scale };
        Ok(self.push(Tensor::scalar(total), op, ng))
    }

    /// `(1/N) Σ_n w_n ‖pred_n − target_n‖²` for `[N, D]` operands.
    pub fn weighted_sq_err(&mut self, pred: Var, target: Var, weights: &[T]) -> Var {
        let ps = self.shape(pred).to_vec();
        assert_eq!(self.shape(target), &ps[..]);
        let n = ps[0];
        assert_eq!(weights.len(), n);
        let d = self.value(pred).len() / n.max(1);
        let pv = self.value(pred).data();
        let tv = self.value(target).data();
        let mut total = T::zero();
        for s in 0..n {
            let e: T = (0..d).map(|k| (pv[s * d + k] - tv[s * d + k]) * (pv[s * d + k] - tv[s * d + k])).sum();
            total += weights[s] * e;
        }
        total /= T::lit(n as f64);
        let ng = self.ng(pred) || self.ng(target);
        self.push(Tensor::scalar(total), Op::WeightedSqErr { pred, target, weights: weights.to_vec() }, ng)
    }

    /// Mean multinomial cross-entropy of `[N, C]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let ls = self.shape(logits).to_vec();
        let (n, c) = (ls[0], ls[1]);
        assert_eq!(labels.len(), n);
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for s in 0..n {
            let row = &lv[s * c..(s + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            for k in 0..c {
                probs[s * c + k] = (row[k] - m).exp() / z;
            }
            total += z.ln() + m - row[labels[s]];
        }
        total /= T::lit(n as f64);
        let ng = self.ng(logits);
        self.push(Tensor::scalar(total), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / T::lit(v.len() as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(self.value(loss).shape(), vec![T::one()]));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bv = self.value(*b).data();
                    let d = gd.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *a, Tensor::from_vec(g.shape(), d));
                }
                if self.ng(*b) {
                    let av = self.value(*a).data();
                    let d = gd.iter().zip(av).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *b, Tensor::from_vec(g.shape(), d));
                }
            }
            Op::Affine(x, s) => self.acc(grads, *x, g.map(|v| v * *s)),
            Op::ColAffine(x, scale) => {
                let d = scale.len();
                let out = gd.iter().enumerate().map(|(i, &v)| v * scale[i % d]).collect();
                self.acc(grads, *x, Tensor::from_vec(g.shape(), out));
            }
            Op::Act(x, a) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let out = gd.iter().zip(xv.iter().zip(yv)).map(|(&gg, (&xx, &yy))| gg * a.derivative(xx, yy)).collect();
                self.acc(grads, *x, Tensor::from_vec(g.shape(), out));
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                let out = gd
                    .iter()
                    .zip(xv)
                    .map(|(&gg, &xx)| if xx > T::zero() { gg } else if xx < T::zero() { -gg } else { T::zero() })
                    .collect();
                self.acc(grads, *x, Tensor::from_vec(g.shape(), out));
            }
            Op::Conv2d { x, w, b, geom, cout, cols } => {
                let n = self.shape(*x)[0];
                let (kk, pp) = (geom.col_rows(), geom.col_cols());
                let cout = *cout;
                if let Some(b) = b {
                    self.acc_with(grads, *b, |db| {
                        for s in 0..n {
                            for o in 0..cout {
                                let base = (s * cout + o) * pp;
                                db[o] += gd[base..base + pp].iter().copied().sum::<T>();
                            }
                        }
                    });
                }
                self.acc_with(grads, *w, |dw| {
                    for s in 0..n {
                        matmul(
                            cout,
                            pp,
                            kk,
                            &gd[s * cout * pp..(s + 1) * cout * pp],
                            Layout::N,
                            &cols[s * kk * pp..(s + 1) * kk * pp],
                            Layout::T,
                            T::one(),
                            T::one(),
                            dw,
                        );
                    }
                });
                if self.ng(*x) {
                    let wv = self.value(*w).data();
                    let mut dcols = vec![T::zero(); kk * pp];
                    self.acc_with(grads, *x, |dx| {
                        for s in 0..n {
                            matmul(kk, cout, pp, wv, Layout::T, &gd[s * cout * pp..(s + 1) * cout * pp], Layout::N, T::one(), T::zero(), &mut dcols);
                            col2im(&dcols, geom, &mut dx[s * geom.in_len()..(s + 1) * geom.in_len()]);
                        }
                    });
                }
            }
            Op::ConvT2d { x, w, b, geom, cin } => {
                let n = self.shape(*x)[0];
                let (kk, pp) = (geom.col_rows(), geom.col_cols());
                let cin = *cin;
                let cout = geom.channels;
                let sp = geom.height * geom.width;
                if let Some(b) = b {
                    self.acc_with(grads, *b, |db| {
                        for s in 0..n {
                            for o in 0..cout {
                                let base = (s * cout + o) * sp;
                                db[o] += gd[base..base + sp].iter().copied().sum::<T>();
                            }
                        }
                    });
                }
                let need_w = self.ng(*w);
                let need_x = self.ng(*x);
                if need_w || need_x {
                    let xv = self.value(*x).data();
                    let wv = self.value(*w).data();
                    let mut dcols = vec![T::zero(); kk * pp];
                    let mut dw_acc = if need_w { vec![T::zero(); cin * kk] } else { Vec::new() };
                    let mut dx_acc = if need_x { vec![T::zero(); n * cin * pp] } else { Vec::new() };
                    for s in 0..n {
                        im2col(&gd[s * geom.in_len()..(s + 1) * geom.in_len()], geom, &mut dcols);
                        if need_x {
                            matmul(cin, kk, pp, wv, Layout::N, &dcols, Layout::N, T::one(), T::zero(), &mut dx_acc[s * cin * pp..(s + 1) * cin * pp]);
                        }
                        if need_w {
                            matmul(cin, pp, kk, &xv[s * cin * pp..(s + 1) * cin * pp], Layout::N, &dcols, Layout::T, T::one(), T::one(), &mut dw_acc);
                        }
                    }
                    if need_w {
                        self.acc(grads, *w, Tensor::from_vec(self.shape(*w), dw_acc));
                    }
                    if need_x {
                        self.acc(grads, *x, Tensor::from_vec(self.shape(*x), dx_acc));
                    }
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let per = c * spatial;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = if self.ng(*x) { Some(vec![T::zero(); n * per]) } else { None };
                for s in 0..n {
                    let r = s * per..(s + 1) * per;
                    group_norm_backward(
                        &gd[r.clone()],
                        &xhat[r.clone()],
                        &rstd[s * groups..(s + 1) * groups],
                        c,
                        spatial,
                        *groups,
                        gv,
                        dx.as_mut().map(|d| &mut d[r]),
                        &mut dgamma,
                        &mut dbeta,
                    );
                }
                self.acc(grads, *gamma, Tensor::from_vec(&[c], dgamma));
                self.acc(grads, *beta, Tensor::from_vec(&[c], dbeta));
                if let Some(dx) = dx {
                    self.acc(grads, *x, Tensor::from_vec(self.shape(*x), dx));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd } => {
                let xs = self.shape(*x);
                let (n, d) = (xs[0], xs[1]);
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        dgamma[j] += gd[i * d + j] * xhat[i * d + j];
                        dbeta[j] += gd[i * d + j];
                    }
                }
                if self.ng(*x) {
                    let inv_n = T::one() / T::lit(n as f64);
                    let mut dx = vec![T::zero(); n * d];
                    for j in 0..d {
                        let md = dbeta[j] * gv[j] * inv_n;
                        let mdx = dgamma[j] * gv[j] * inv_n;
                        for i in 0..n {
                            let dxh = gd[i * d + j] * gv[j];
                            dx[i * d + j] = rstd[j] * (dxh - md - xhat[i * d + j] * mdx);
                        }
                    }
                    self.acc(grads, *x, Tensor::from_vec(xs, dx));
                }
                self.acc(grads, *gamma, Tensor::from_vec(&[d], dgamma));
                self.acc(grads, *beta, Tensor::from_vec(&[d], dbeta));
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (n, din, dout) = (xs[0], xs[1], ws[0]);
                if let Some(b) = b {
                    self.acc_with(grads, *b, |db| {
                        for row in gd.chunks_exact(dout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    });
                }
                if self.ng(*w) {
                    let xv = self.value(*x).data();
                    self.acc_with(grads, *w, |dw| matmul(dout, n, din, gd, Layout::T, xv, Layout::N, T::one(), T::one(), dw));
                }
                if self.ng(*x) {
                    let wv = self.value(*w).data();
                    self.acc_with(grads, *x, |dx| matmul(n, dout, din, gd, Layout::N, wv, Layout::N, T::one(), T::one(), dx));
                }
            }
            Op::Concat(parts) => {
                let n = g.shape()[0];
                let mut offset = 0;
                let row = g.len() / n;
                for &p in parts {
                    let inner = self.value(p).len() / n;
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(n * inner);
                        for s in 0..n {
                            d.extend_from_slice(&gd[s * row + offset..s * row + offset + inner]);
                        }
                        self.acc(grads, p, Tensor::from_vec(self.shape(p), d));
                    }
                    offset += inner;
                }
            }
            Op::Reshape(x) => self.acc(grads, *x, g.clone().reshape(self.shape(*x))),
            Op::SliceChannels { x, start } => {
                let xs = self.shape(*x).to_vec();
                let (n, c) = (xs[0], xs[1]);
                let len = g.shape()[1];
                let spatial: usize = xs[2..].iter().product();
                let start = *start;
                self.acc_with(grads, *x, |dx| {
                    for s in 0..n {
                        let src = &gd[s * len * spatial..(s + 1) * len * spatial];
                        let base = (s * c + start) * spatial;
                        for (d, &v) in dx[base..base + len * spatial].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                });
            }
            Op::HFlip(x) => {
                let w = *g.shape().last().unwrap();
                let mut out = vec![T::zero(); g.len()];
                render::hflip_planes(gd, w, &mut out);
                self.acc(grads, *x, Tensor::from_vec(g.shape(), out));
            }
            Op::Render(rn) => {
                let a_s = self.shape(rn.albedo).to_vec();
                let (n, c, h, w) = (a_s[0], a_s[1], a_s[2], a_s[3]);
                let per = c * h * w;
                let mut da = vec![T::zero(); n * per];
                let mut dd = vec![T::zero(); n * h * w];
                let mut dp = vec![T::zero(); n * 6];
                let mut dl = vec![T::zero(); n * 4];
                for s in 0..n {
                    let (am, dm, p, l) = self.render_inputs(rn.albedo, rn.depth, rn.pose, rn.light, s);
                    let dimg = Map::new(c, h, w, gd[s * per..(s + 1) * per].to_vec());
                    let rg = render::render_backward(&am, &dm, &p, &l, &rn.cam, &rn.caches[s], &dimg);
                    da[s * per..(s + 1) * per].copy_from_slice(&rg.albedo.data);
                    dd[s * h * w..(s + 1) * h * w].copy_from_slice(&rg.depth.data);
                    dp[s * 6..(s + 1) * 6].copy_from_slice(&rg.pose);
                    dl[s * 4..(s + 1) * 4].copy_from_slice(&rg.light);
                }
                self.acc(grads, rn.albedo, Tensor::from_vec(&a_s, da));
                self.acc(grads, rn.depth, Tensor::from_vec(self.shape(rn.depth), dd));
                self.acc(grads, rn.pose, Tensor::from_vec(self.shape(rn.pose), dp));
                self.acc(grads, rn.light, Tensor::from_vec(self.shape(rn.light), dl));
            }
            Op::ConfLoss { pred, target, sigma, mask, scale } => {
                let ps = self.shape(*pred);
                let (n, c) = (ps[0], ps[1]);
                let sp: usize = ps[2..].iter().product();
                let pv = self.value(*pred).data();
                let tv = self.value(*target).data();
                let sv = self.value(*sigma).data();
                let g0 = gd[0];
                let sqrt2 = T::SQRT_2();
                let mut dpred = vec![T::zero(); pv.len()];
                let mut dsig = vec![T::zero(); sv.len()];
                for s in 0..n {
                    let k = g0 * scale[s];
                    for p in 0..sp {
                        if mask.as_ref().is_some_and(|m| !m[s * sp + p]) {
                            continue;
                        }
                        let sg = sv[s * sp + p];
                        let mut ds = T::zero();
                        for ch in 0..c {
                            let idx = (s * c + ch) * sp + p;
                            let d = pv[idx] - tv[idx];
                            let sign = if d > T::zero() {
                                T::one()
                            } else if d < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            dpred[idx] = k * sqrt2 * sign / sg;
                            ds += T::one() / sg - sqrt2 * d.abs() / (sg * sg);
                        }
                        dsig[s * sp + p] = k * ds;
                    }
                }
                if self.ng(*target) {
                    self.acc(grads, *target, Tensor::from_vec(ps, dpred.iter().map(|&v| -v).collect()));
                }
                self.acc(grads, *pred, Tensor::from_vec(ps, dpred));
                self.acc(grads, *sigma, Tensor::from_vec(self.shape(*sigma), dsig));
            }
            Op::WeightedSqErr { pred, target, weights } => {
                let ps = self.shape(*pred);
                let n = ps[0];
                let d = self.value(*pred).len() / n.max(1);
                let pv = self.value(*pred).data();
                let tv = self.value(*target).data();
                let k = gd[0] * T::lit(2.0) / T::lit(n as f64);
                let dp: Vec<T> = (0..n * d).map(|i| k * weights[i / d] * (pv[i] - tv[i])).collect();
                if self.ng(*target) {
                    self.acc(grads, *target, Tensor::from_vec(ps, dp.iter().map(|&v| -v).collect()));
                }
                self.acc(grads, *pred, Tensor::from_vec(ps, dp));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let ls = self.shape(*logits);
                let (n, c) = (ls[0], ls[1]);
                let k = gd[0] / T::lit(n as f64);
                let mut d = probs.clone();
                for s in 0..n {
                    d[s * c + labels[s]] -= T::one();
                }
                for v in &mut d {
                    *v *= k;
                }
                self.acc(grads, *logits, Tensor::from_vec(ls, d));
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                let v = gd[0] / T::lit(len as f64);
                self.acc(grads, *x, Tensor::full(self.shape(*x), v));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::params::{Bound, ParamSet};
    use crate::rng::{normal_vec, stream, uniform};

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, normal_vec(&mut stream(seed, &[]), n))
    }

    fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = stream(seed, &[]);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| uniform(&mut r, 0.3, 1.5)).collect())
    }

    fn check(p: &ParamSet<f64>, f: impl Fn(&mut Graph<f64>, &Bound) -> Var) {
        let r = check_params(p, f, 1e-5, 1e-6, 40, 0);
        assert!(r.max_rel < 1e-5, "{r:?}");
    }

    /// Weighted sum reduces any tensor to a scalar with a generic gradient.
    fn probe(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
        let w = g.constant(randn(g.shape(x), seed + 1000));
        let m = g.mul(x, w);
        g.mean(m)
    }

    #[test]
    fn scale_activation_stays_positive_in_f32() {
        for x in [-200.0f32, -120.0, -30.0] {
            assert_eq!(Activation::Scale.apply(x), SCALE_FLOOR as f32);
            assert_eq!(Activation::Scale.derivative(x, SCALE_FLOOR as f32), 0.0);
        }
        for x in [-3.0f32, 0.0, 2.5, 40.0] {
            assert_eq!(Activation::Scale.apply(x), Activation::Softplus.apply(x));
        }
    }

    #[test]
    fn conv_and_transposed_conv_gradients() {
        let mut p = ParamSet::new();
        p.insert("x", randn(&[2, 3, 7, 6], 1));
        p.insert("w", randn(&[4, 3, 4, 4], 2));
        p.insert("b", randn(&[4], 3));
        p.insert("wt", randn(&[4, 2, 4, 4], 4));
        p.insert("bt", randn(&[2], 5));
        check(&p, |g, b| {
            let y = g.conv2d(b.var("x"), b.var("w"), Some(b.var("b")), 2, 1);
            let z = g.conv_transpose2d(y, b.var("wt"), Some(b.var("bt")), 2, 1);
            probe(g, z, 0)
        });
    }

    #[test]
    fn normalization_gradients() {
        let mut p = ParamSet::new();
        p.insert("x", randn(&[3, 8, 2, 3], 6));
        p.insert("g", randn(&[8], 7));
        p.insert("b", randn(&[8], 8));
        p.insert("v", randn(&[5, 4], 9));
        p.insert("bg", randn(&[4], 10));
        p.insert("bb", randn(&[4], 11));
        check(&p, |g, b| {
            let y = g.group_norm(b.var("x"), b.var("g"), b.var("b"), 2);
            let z = g.batch_norm(b.var("v"), b.var("bg"), b.var("bb"), 1e-5);
            let a = probe(g, y, 1);
            let c = probe(g, z, 2);
            g.add(a, c)
        });
    }

    #[test]
    fn pointwise_and_structural_gradients() {
        let mut p = ParamSet::new();
        p.insert("a", randn(&[2, 3, 2, 4], 12));
        p.insert("c", randn(&[2, 2, 2, 4], 13));
        p.insert("w", randn(&[5, 40], 14));
        p.insert("bias", randn(&[5], 15));
        check(&p, |g, b| {
            let mut acc = Vec::new();
            for (i, act) in [Activation::Relu, Activation::LeakyRelu(0.2), Activation::Tanh, Activation::Softplus, Activation::Scale, Activation::Sigmoid, Activation::Swish]
                .into_iter()
                .enumerate()
            {
                let y = g.act(b.var("a"), act);
                acc.push(probe(g, y, 20 + i as u64));
            }
            let cat = g.concat(&[b.var("a"), b.var("c")]);
            let sl = g.slice_channels(cat, 1, 3);
            let fl = g.hflip(sl);
            let ab = g.abs(fl);
            let prod = g.mul(ab, sl);
            let d = g.sub(prod, sl);
            let aff = g.affine(d, 1.5, -0.25);
            acc.push(probe(g, aff, 30));
            let flat = g.reshape(cat, &[2, 40]);
            let lin = g.linear(flat, b.var("w"), Some(b.var("bias")));
            let ca = g.col_affine(lin, &[1.0, -2.0, 0.5, 3.0, 1.0], &[0.0; 5]);
            acc.push(probe(g, ca, 31));
            let mut total = acc[0];
            for &v in &acc[1..] {
                total = g.add(total, v);
            }
            total
        });
    }

    #[test]
    fn loss_gradients() {
        let mut p = ParamSet::new();
        p.insert("pred", randn(&[2, 3, 4, 4], 40));
        p.insert("target", randn(&[2, 3, 4, 4], 41));
        p.insert("sigma", positive(&[2, 1, 4, 4], 42));
        p.insert("logits", randn(&[4, 3], 43));
        p.insert("z", randn(&[3, 5], 44));
        p.insert("z0", randn(&[3, 5], 45));
        let mask: Vec<bool> = (0..32).map(|i| i % 3 != 0).collect();
        check(&p, |g, b| {
            let a = g.conf_loss(b.var("pred"), b.var("target"), b.var("sigma"), Some(&mask)).unwrap();
            let c = g.cross_entropy(b.var("logits"), &[0, 2, 1, 2]);
            let d = g.weighted_sq_err(b.var("z"), b.var("z0"), &[0.5, 2.0, 1.0]);
            let s = g.add(a, c);
            g.add(s, d)
        });
    }

    #[test]
    fn batched_render_gradients() {
        let mut r = stream(50, &[]);
        let mut p = ParamSet::new();
        p.insert("albedo", Tensor::from_vec(&[2, 3, 6, 6], (0..216).map(|_| uniform(&mut r, 0.1, 0.9)).collect()));
        p.insert("depth", Tensor::from_vec(&[2, 1, 6, 6], (0..72).map(|_| uniform(&mut r, 0.98, 1.02)).collect()));
        p.insert("light", Tensor::from_vec(&[2, 4], alloc::vec![0.5, 0.4, 0.1, -0.2, 0.3, 0.6, -0.1, 0.05]));
        p.insert("pose", Tensor::from_vec(&[2, 6], alloc::vec![0.11, -0.07, 0.05, 0.013, -0.021, 0.03, -0.2, 0.1, -0.06, -0.017, 0.008, -0.04]));
        check(&p, |g, b| {
            let (img, mask) = g.render(b.var("albedo"), b.var("depth"), b.var("pose"), b.var("light"), Camera::default()).unwrap();
            assert!(mask.iter().any(|&m| m));
            probe(g, img, 51)
        });
    }

    #[test]
    fn empty_mask_and_bad_scale_are_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let s = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        assert_eq!(g.conf_loss(x, x, s, Some(&[false; 4])).unwrap_err(), GraphError::EmptyMask);
        let z = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert_eq!(g.conf_loss(x, x, z, None).unwrap_err(), GraphError::NonPositiveScale);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::ones(&[3]));
        let w = g.param(Tensor::full(&[3], 2.0));
        let y = g.mul(c, w);
        let l = g.mean(y);
        let grads = g.backward(l);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0 / 3.0; 3]);
    }
}

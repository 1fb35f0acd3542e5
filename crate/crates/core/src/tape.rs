//! Define-by-run reverse-mode differentiation.
//!
//! Every differentiable call appends a node holding its output value and the
//! ids of its inputs. [`Tape::backward`] walks the nodes in strict reverse
//! creation order, summing contributions for values that were consumed more
//! than once.

use crate::error::{Result, SacError};
use crate::kernels::{self, ConvSpec};
use crate::real::Real;
use crate::tensor::{numel, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Per-entry role in a focal loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 1.5,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(SacError::Invalid(format!("focal alpha {} outside (0, 1]", self.alpha)));
        }
        if !(self.gamma >= 0.0) {
            return Err(SacError::Invalid(format!("focal gamma {} is negative", self.gamma)));
        }
        Ok(())
    }
}

/// Probability clamp applied before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: usize, w: usize, b: Option<usize>, spec: ConvSpec },
    AvgPool { x: usize, k: usize, s: usize, p: usize },
    ReflectPad { x: usize, pad: usize },
    GlobalAvgPool { x: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Affine { x: usize, scale: f64 },
    Sigmoid { x: usize },
    Swish { x: usize },
    Relu { x: usize },
    Upsample { x: usize, f: usize },
    Sum { x: usize },
    AnchorMajor { x: usize, per_anchor: usize },
    Concat { xs: Vec<usize> },
    Focal { z: usize, targets: Vec<Target>, params: FocalParams, norm: f64 },
    SmoothL1 { pred: usize, target: Vec<f64>, mask: Vec<bool>, beta: f64, norm: f64 },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations. Confined to one thread.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient from the last [`Tape::backward`], if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor; zeros when `v` was not reached.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v);
        match self.grad(v) {
            Some(g) => Tensor::from_vec(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.len() == numel(&value.shape()));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn data(&self, v: usize) -> &[T] {
        self.nodes[v].value.data()
    }

    fn emit(&mut self, shape: Shape, data: Vec<T>, op: Op, inputs: &[usize]) -> Var {
        let rg = self.rg(inputs);
        let t = Tensor::from_vec(shape, data).expect("kernel produced consistent shape");
        self.push(t, op, rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if let Some(b) = b {
            let bs = self.shape(b);
            if numel(&bs) != ws[0] {
                return Err(SacError::shape(
                    "conv2d",
                    format!("bias has {} entries but C_out={}", numel(&bs), ws[0]),
                ));
            }
        }
        let (out, os) = kernels::conv2d_forward(
            self.data(x.0),
            xs,
            self.data(w.0),
            ws,
            b.map(|b| self.data(b.0)),
            &spec,
        )?;
        let mut ins = vec![x.0, w.0];
        ins.extend(b.map(|b| b.0));
        Ok(self.emit(os, out, Op::Conv2d { x: x.0, w: w.0, b: b.map(|b| b.0), spec }, &ins))
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (out, os) = kernels::avg_pool_forward(self.data(x.0), self.shape(x), kernel, stride, padding)?;
        Ok(self.emit(
            os,
            out,
            Op::AvgPool {
                x: x.0,
                k: kernel,
                s: stride,
                p: padding,
            },
            &[x.0],
        ))
    }

    pub fn reflection_pad2d(&mut self, x: Var, pad: usize) -> Result<Var> {
        if pad == 0 {
            return Ok(x);
        }
        let (out, os) = kernels::reflection_pad_forward(self.data(x.0), self.shape(x), pad)?;
        Ok(self.emit(os, out, Op::ReflectPad { x: x.0, pad }, &[x.0]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let hw = h * w;
        let inv = T::one() / T::lit(hw as f64);
        let out: Vec<T> = self
            .data(x.0)
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        self.emit([n, c, 1, 1], out, Op::GlobalAvgPool { x: x.0 }, &[x.0])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Shape, Vec<T>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let os = kernels::broadcast_shape(name, sa, sb)?;
        let (da, db) = (self.data(a.0), self.data(b.0));
        let mut out = vec![T::zero(); numel(&os)];
        kernels::for_each_broadcast(os, sa, sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
        Ok((os, out))
    }

    /// Broadcasting sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (os, out) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.emit(os, out, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Broadcasting product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (os, out) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.emit(os, out, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (T::lit(scale), T::lit(shift));
        let out = self.data(x.0).iter().map(|&v| s * v + t).collect();
        self.emit(self.shape(x), out, Op::Affine { x: x.0, scale }, &[x.0])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.data(x.0).iter().map(|&v| sigmoid(v)).collect();
        self.emit(self.shape(x), out, Op::Sigmoid { x: x.0 }, &[x.0])
    }

    pub fn swish(&mut self, x: Var) -> Var {
        let out = self.data(x.0).iter().map(|&v| v * sigmoid(v)).collect();
        self.emit(self.shape(x), out, Op::Swish { x: x.0 }, &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.data(x.0).iter().map(|&v| v.max(T::zero())).collect();
        self.emit(self.shape(x), out, Op::Relu { x: x.0 }, &[x.0])
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(SacError::Invalid("upsample factor must be >= 1".into()));
        }
        let (out, os) = kernels::upsample_nearest_forward(self.data(x.0), self.shape(x), factor);
        Ok(self.emit(os, out, Op::Upsample { x: x.0, f: factor }, &[x.0]))
    }

    /// Sum of all entries as a `(1,1,1,1)` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x.0).iter().copied().sum();
        self.emit([1, 1, 1, 1], vec![s], Op::Sum { x: x.0 }, &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Reorders a head output `(N, A*K, H, W)` into `(N, H*W*A, K, 1)`:
    /// cells row-major, then anchors within a cell.
    pub fn anchor_major(&mut self, x: Var, per_anchor: usize) -> Result<Var> {
        let [n, ch, h, w] = self.shape(x);
        if per_anchor == 0 || ch % per_anchor != 0 {
            return Err(SacError::shape(
                "anchor_major",
                format!("channels {ch} not divisible by per-anchor width {per_anchor}"),
            ));
        }
        let a = ch / per_anchor;
        let src = self.data(x.0);
        let mut out = vec![T::zero(); src.len()];
        for ni in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    for ai in 0..a {
                        for k in 0..per_anchor {
                            let row = (y * w + xx) * a + ai;
                            let o = (ni * h * w * a + row) * per_anchor + k;
                            out[o] = src[((ni * ch + ai * per_anchor + k) * h + y) * w + xx];
                        }
                    }
                }
            }
        }
        Ok(self.emit([n, h * w * a, per_anchor, 1], out, Op::AnchorMajor { x: x.0, per_anchor }, &[x.0]))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| SacError::Invalid("concat of zero tensors".into()))?;
        let [n, _, h, w] = self.shape(*first);
        let mut c_total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s[0] != n || s[2] != h || s[3] != w {
                return Err(SacError::shape(
                    "concat",
                    format!("{s:?} incompatible with batch {n}, spatial {h}x{w}"),
                ));
            }
            c_total += s[1];
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * c_total * plane);
        for ni in 0..n {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.data(v.0)[ni * c * plane..][..c * plane]);
            }
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        Ok(self.emit([n, c_total, h, w], out, Op::Concat { xs: ids.clone() }, &ids))
    }

    /// Sigmoid focal loss summed over non-ignored entries of `logits`, divided by `norm`.
    pub fn focal_loss(&mut self, logits: Var, targets: Vec<Target>, params: FocalParams, norm: f64) -> Result<Var> {
        params.validate()?;
        if targets.len() != self.value(logits).len() {
            return Err(SacError::shape(
                "focal_loss",
                format!("{} targets for {} logits", targets.len(), self.value(logits).len()),
            ));
        }
        let norm = norm.max(1.0);
        let mut total = 0.0;
        for (z, t) in self.data(logits.0).iter().zip(&targets) {
            total += focal_logit_term(z.as_f64(), *t, params).0;
        }
        Ok(self.emit(
            [1, 1, 1, 1],
            vec![T::lit(total / norm)],
            Op::Focal {
                z: logits.0,
                targets,
                params,
                norm,
            },
            &[logits.0],
        ))
    }

    /// Which side of every non-smooth point each recorded entry sits on:
    /// ReLU input signs, focal logit clamps and smooth-L1 branches. Two
    /// evaluations with equal signatures lie in the same smooth piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        let limit = ((1.0 - PROB_EPS) / PROB_EPS).ln();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => sig.extend(self.data(*x).iter().map(|v| *v > T::zero())),
                Op::Focal { z, .. } => sig.extend(self.data(*z).iter().flat_map(|v| {
                    let v = v.as_f64();
                    [v < -limit, v > limit]
                })),
                Op::SmoothL1 { pred, target, mask, beta, .. } => sig.extend(
                    self.data(*pred)
                        .iter()
                        .zip(target)
                        .zip(mask)
                        .filter(|(_, m)| **m)
                        .map(|((p, t), _)| (p.as_f64() - t).abs() < *beta),
                ),
                _ => {}
            }
        }
        sig
    }

    /// Smooth-L1 summed over masked entries and divided by `norm`; zero when the mask is empty.
    pub fn smooth_l1(&mut self, pred: Var, target: Vec<f64>, mask: Vec<bool>, beta: f64, norm: f64) -> Result<Var> {
        let len = self.value(pred).len();
        if target.len() != len || mask.len() != len {
            return Err(SacError::shape(
                "smooth_l1",
                format!("pred has {len} entries, target {}, mask {}", target.len(), mask.len()),
            ));
        }
        if !(beta > 0.0) {
            return Err(SacError::Invalid(format!("smooth-L1 beta must be positive, got {beta}")));
        }
        let norm = norm.max(1.0);
        let mut total = 0.0;
        for ((p, t), m) in self.data(pred.0).iter().zip(&target).zip(&mask) {
            if *m {
                total += smooth_l1_term(p.as_f64() - t, beta).0;
            }
        }
        Ok(self.emit(
            [1, 1, 1, 1],
            vec![T::lit(total / norm)],
            Op::SmoothL1 {
                pred: pred.0,
                target,
                mask,
                beta,
                norm,
            },
            &[pred.0],
        ))
    }

    fn accumulate(&mut self, id: usize, contribution: Vec<T>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => g.iter_mut().zip(contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Populates gradients of every tracked value reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if numel(&shape) != 1 {
            return Err(SacError::NonScalarLoss(shape));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let (nx, nw) = (self.nodes[x].requires_grad, self.nodes[w].requires_grad);
                let nb = b.is_some_and(|b| self.nodes[b].requires_grad);
                let (gx, gw, gb) = kernels::conv2d_backward(
                    g,
                    self.data(x),
                    self.nodes[x].value.shape(),
                    self.data(w),
                    self.nodes[w].value.shape(),
                    &spec,
                    nx,
                    nw,
                    nb,
                );
                if let Some(gx) = gx {
                    self.accumulate(x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(w, gw);
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.accumulate(b, gb);
                }
            }
            Op::AvgPool { x, k, s, p } => {
                let gx = kernels::avg_pool_backward(g, self.nodes[x].value.shape(), self.nodes[i].value.shape(), k, s, p);
                self.accumulate(x, gx);
            }
            Op::ReflectPad { x, pad } => {
                let gx = kernels::reflection_pad_backward(g, self.nodes[x].value.shape(), pad);
                self.accumulate(x, gx);
            }
            Op::GlobalAvgPool { x } => {
                let [_, _, h, w] = self.nodes[x].value.shape();
                let inv = T::one() / T::lit((h * w) as f64);
                let gx = g.iter().flat_map(|&gi| std::iter::repeat(gi * inv).take(h * w)).collect();
                self.accumulate(x, gx);
            }
            Op::Add { a, b } => {
                let os = self.nodes[i].value.shape();
                let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
                let mut ga = self.nodes[a].requires_grad.then(|| vec![T::zero(); numel(&sa)]);
                let mut gb = self.nodes[b].requires_grad.then(|| vec![T::zero(); numel(&sb)]);
                kernels::for_each_broadcast(os, sa, sb, |o, ia, ib| {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += g[o];
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += g[o];
                    }
                });
                if let Some(ga) = ga {
                    self.accumulate(a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(b, gb);
                }
            }
            Op::Mul { a, b } => {
                let os = self.nodes[i].value.shape();
                let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
                let (da, db) = (self.data(a), self.data(b));
                let mut ga = self.nodes[a].requires_grad.then(|| vec![T::zero(); numel(&sa)]);
                let mut gb = self.nodes[b].requires_grad.then(|| vec![T::zero(); numel(&sb)]);
                kernels::for_each_broadcast(os, sa, sb, |o, ia, ib| {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += g[o] * db[ib];
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += g[o] * da[ia];
                    }
                });
                if let Some(ga) = ga {
                    self.accumulate(a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(b, gb);
                }
            }
            Op::Affine { x, scale } => {
                let s = T::lit(scale);
                self.accumulate(x, g.iter().map(|&v| v * s).collect());
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[i].value.data();
                let gx = g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect();
                self.accumulate(x, gx);
            }
            Op::Swish { x } => {
                let gx = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(&gi, &xi)| {
                        let s = sigmoid(xi);
                        gi * (s + xi * s * (T::one() - s))
                    })
                    .collect();
                self.accumulate(x, gx);
            }
            Op::Relu { x } => {
                let gx = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                self.accumulate(x, gx);
            }
            Op::Upsample { x, f } => {
                let gx = kernels::upsample_nearest_backward(g, self.nodes[x].value.shape(), f);
                self.accumulate(x, gx);
            }
            Op::Sum { x } => {
                let n = self.nodes[x].value.len();
                self.accumulate(x, vec![g[0]; n]);
            }
            Op::AnchorMajor { x, per_anchor } => {
                let [n, ch, h, w] = self.nodes[x].value.shape();
                let a = ch / per_anchor;
                let mut gx = vec![T::zero(); n * ch * h * w];
                for ni in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            for ai in 0..a {
                                for k in 0..per_anchor {
                                    let row = (y * w + xx) * a + ai;
                                    let o = (ni * h * w * a + row) * per_anchor + k;
                                    gx[((ni * ch + ai * per_anchor + k) * h + y) * w + xx] = g[o];
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, gx);
            }
            Op::Concat { xs } => {
                let [n, c_total, h, w] = self.nodes[i].value.shape();
                let plane = h * w;
                let mut offset = 0;
                for &v in &xs {
                    let c = self.nodes[v].value.shape()[1];
                    if self.nodes[v].requires_grad {
                        let mut gv = Vec::with_capacity(n * c * plane);
                        for ni in 0..n {
                            gv.extend_from_slice(&g[(ni * c_total + offset) * plane..][..c * plane]);
                        }
                        self.accumulate(v, gv);
                    }
                    offset += c;
                }
            }
            Op::Focal { z, targets, params, norm } => {
                let scale = g[0].as_f64() / norm;
                let gz = self
                    .data(z)
                    .iter()
                    .zip(&targets)
                    .map(|(zi, t)| T::lit(scale * focal_logit_term(zi.as_f64(), *t, params).1))
                    .collect();
                self.accumulate(z, gz);
            }
            Op::SmoothL1 { pred, target, mask, beta, norm } => {
                let scale = g[0].as_f64() / norm;
                let gp = self
                    .data(pred)
                    .iter()
                    .zip(&target)
                    .zip(&mask)
                    .map(|((p, t), m)| {
                        if *m {
                            T::lit(scale * smooth_l1_term(p.as_f64() - t, beta).1)
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(pred, gp);
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Focal term for one entry and its derivative with respect to the probability `p`.
///
/// The probability is clamped to `[PROB_EPS, 1 - PROB_EPS]`; the derivative is
/// zero wherever the clamp is active.
pub fn focal_term(p: f64, t: Target, params: FocalParams) -> (f64, f64) {
    let FocalParams { alpha, gamma } = params;
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let live = p == pc;
    match t {
        Target::Ignore => (0.0, 0.0),
        Target::Positive => {
            let q = 1.0 - pc;
            let loss = -alpha * q.powf(gamma) * pc.ln();
            let d = if !live {
                0.0
            } else {
                let mod_term = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * pc.ln() };
                alpha * mod_term - alpha * q.powf(gamma) / pc
            };
            (loss, d)
        }
        Target::Negative => {
            let q = 1.0 - pc;
            let loss = -(1.0 - alpha) * pc.powf(gamma) * q.ln();
            let d = if !live {
                0.0
            } else {
                let mod_term = if gamma == 0.0 { 0.0 } else { gamma * pc.powf(gamma - 1.0) * q.ln() };
                -(1.0 - alpha) * (mod_term - pc.powf(gamma) / q)
            };
            (loss, d)
        }
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Focal term for one entry as a function of its logit `z`, and `dL/dz`.
///
/// Same value as [`focal_term`] at `p = sigmoid(z)`, but `ln p` and `ln(1-p)`
/// come from softplus so saturated logits keep full precision. The
/// probability clamp becomes a clamp of `z` to `±logit(1 - PROB_EPS)`.
pub fn focal_logit_term(z: f64, t: Target, params: FocalParams) -> (f64, f64) {
    let FocalParams { alpha, gamma } = params;
    let limit = ((1.0 - PROB_EPS) / PROB_EPS).ln();
    let zc = z.clamp(-limit, limit);
    let live = z == zc;
    let (p, q) = (sigmoid(zc), sigmoid(-zc));
    let (ln_p, ln_q) = (-softplus(-zc), -softplus(zc));
    match t {
        Target::Ignore => (0.0, 0.0),
        Target::Positive => {
            let loss = -alpha * q.powf(gamma) * ln_p;
            let d = if live { alpha * q.powf(gamma) * (gamma * p * ln_p - q) } else { 0.0 };
            (loss, d)
        }
        Target::Negative => {
            let loss = -(1.0 - alpha) * p.powf(gamma) * ln_q;
            let d = if live { (1.0 - alpha) * p.powf(gamma) * (p - gamma * q * ln_q) } else { 0.0 };
            (loss, d)
        }
    }
}

/// Smooth-L1 value and derivative for a residual `d`.
pub fn smooth_l1_term(d: f64, beta: f64) -> (f64, f64) {
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

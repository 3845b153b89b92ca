//! Reverse-mode automatic differentiation over [`Tensor4`] values.
//!
//! Ops are recorded on a [`Tape`] in execution order; [`Tape::backward`]
//! replays them once in reverse, accumulating gradients for every
//! recorded value that (transitively) requires one. The tape is
//! single-owner and append-only, so topological order is the insertion
//! order by construction.

mod conv;
mod loss_ops;
mod norm;

pub use conv::{ConvCfg, ConvTransposeCfg, EdgeGeom};
use conv::FusedEdge;
pub use norm::BnMode;
use norm::BnSaved;

use alloc::vec::Vec;
use alloc::{format, vec};

use crate::tensor::{Element, LabelMap, PixelMask, Tensor4};
use crate::{Error, Result};

/// Handle to one value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

pub(crate) struct LossSaved<T> {
    pub input: VarId,
    pub target: LabelMap,
    pub mask: Option<PixelMask>,
    pub included: usize,
    /// Per-element softmax probabilities (classification losses only).
    pub probs: Vec<T>,
}

pub(crate) enum Op<T: Element> {
    Leaf,
    Conv2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        cfg: ConvCfg,
    },
    ConvTranspose2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        cfg: ConvTransposeCfg,
    },
    ConvSum {
        edges: Vec<FusedEdge>,
        bias: Option<VarId>,
    },
    MaxPool2d {
        x: VarId,
        argmax: Vec<u32>,
    },
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        saved: BnSaved<T>,
    },
    Relu {
        x: VarId,
    },
    Concat {
        xs: Vec<VarId>,
    },
    SumN {
        xs: Vec<VarId>,
    },
    BiasAdd {
        x: VarId,
        b: VarId,
    },
    SoftmaxChannels {
        x: VarId,
    },
    Reshape {
        x: VarId,
        from: [usize; 4],
    },
    Upsample2 {
        x: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
    },
    Scale {
        x: VarId,
        factor: T,
    },
    SumAll {
        x: VarId,
    },
    CrossEntropy(LossSaved<T>),
    Focal {
        saved: LossSaved<T>,
        gamma: f64,
        class_weights: Option<Vec<f64>>,
    },
    Dice {
        saved: LossSaved<T>,
        /// Per-class (numerator, denominator) of the soft overlap ratio.
        terms: Vec<(T, T)>,
    },
    Tversky {
        saved: LossSaved<T>,
        alpha: f64,
        beta: f64,
        terms: Vec<(T, T)>,
    },
    Mse {
        x: VarId,
        target: Tensor4<T>,
        mask: Option<PixelMask>,
        included: usize,
    },
}

struct Node<T: Element> {
    value: Tensor4<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed primitive ops.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
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

    /// Registers an input value. Its `requires_grad` flag decides whether
    /// `backward` produces a gradient for it.
    pub fn leaf(&mut self, value: Tensor4<T>) -> VarId {
        let needs = value.requires_grad;
        self.push(value, Op::Leaf, needs)
    }

    pub fn value(&self, id: VarId) -> &Tensor4<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` seed w.r.t. `id`, if one was produced.
    pub fn grad(&self, id: VarId) -> Option<&Tensor4<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Removes and returns a value and its gradient, leaving a placeholder.
    pub fn take(&mut self, id: VarId) -> (Tensor4<T>, Option<Tensor4<T>>) {
        let value = core::mem::replace(&mut self.nodes[id.0].value, Tensor4::scalar(T::zero()));
        let grad = self.grads.get_mut(id.0).and_then(|g| g.take());
        (value, grad)
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Rectified linear unit; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: VarId) -> VarId {
        let v = self.value(x);
        let out = Tensor4::new(
            v.shape(),
            v.iter()
                .map(|&a| if a > T::zero() { a } else { T::zero() })
                .collect(),
        )
        .expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Relu { x }, needs)
    }

    /// Channel-axis concatenation; inputs must share batch and spatial dims.
    pub fn concat_channels(&mut self, xs: &[VarId]) -> Result<VarId> {
        if xs.is_empty() {
            return Err(Error::usage("concat of zero tensors"));
        }
        let [b, _, h, w] = self.value(xs[0]).shape();
        let mut channels = 0;
        for &x in xs {
            let s = self.value(x).shape();
            if s[0] != b || s[2] != h || s[3] != w {
                return Err(Error::dim(format!(
                    "concat input {:?} incompatible with ({b}, _, {h}, {w})",
                    s
                )));
            }
            channels += s[1];
        }
        let mut data = Vec::with_capacity(b * channels * h * w);
        for bi in 0..b {
            for &x in xs {
                let v = self.value(x);
                let c = v.channels();
                let plane = c * h * w;
                data.extend_from_slice(&v.data()[bi * plane..(bi + 1) * plane]);
            }
        }
        let out = Tensor4::new([b, channels, h, w], data)?;
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(out, Op::Concat { xs: xs.to_vec() }, needs))
    }

    /// Elementwise sum of any number of same-shape tensors.
    pub fn sum_n(&mut self, xs: &[VarId]) -> Result<VarId> {
        if xs.is_empty() {
            return Err(Error::usage("sum of zero tensors"));
        }
        let shape = self.value(xs[0]).shape();
        for &x in &xs[1..] {
            if self.value(x).shape() != shape {
                return Err(Error::dim(format!(
                    "sum input {:?} != {:?}",
                    self.value(x).shape(),
                    shape
                )));
            }
        }
        let mut data = self.value(xs[0]).data().to_vec();
        for &x in &xs[1..] {
            for (d, &s) in data.iter_mut().zip(self.value(x).iter()) {
                *d = *d + s;
            }
        }
        let out = Tensor4::new(shape, data)?;
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(out, Op::SumN { xs: xs.to_vec() }, needs))
    }

    pub fn add(&mut self, x: VarId, y: VarId) -> Result<VarId> {
        self.sum_n(&[x, y])
    }

    /// Adds a per-channel bias `b` of shape `(1, c, 1, 1)`.
    pub fn bias_add(&mut self, x: VarId, b: VarId) -> Result<VarId> {
        let [bs, c, h, w] = self.value(x).shape();
        if self.value(b).shape() != [1, c, 1, 1] {
            return Err(Error::dim(format!(
                "bias shape {:?}, expected (1, {c}, 1, 1)",
                self.value(b).shape()
            )));
        }
        let mut data = self.value(x).data().to_vec();
        {
            let bias = self.value(b).data();
            let plane = h * w;
            for bi in 0..bs {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    let add = bias[ci];
                    for v in &mut data[base..base + plane] {
                        *v = *v + add;
                    }
                }
            }
        }
        let out = Tensor4::new([bs, c, h, w], data)?;
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::BiasAdd { x, b }, needs))
    }

    /// Per-pixel softmax over the channel axis.
    pub fn softmax_channels(&mut self, x: VarId) -> VarId {
        let v = self.value(x);
        let [b, c, h, w] = v.shape();
        let plane = h * w;
        let mut data = vec![T::zero(); v.numel()];
        for bi in 0..b {
            for p in 0..plane {
                let mut max = T::neg_infinity();
                for ci in 0..c {
                    max = max.max(v.data()[(bi * c + ci) * plane + p]);
                }
                let mut denom = T::zero();
                for ci in 0..c {
                    let e = (v.data()[(bi * c + ci) * plane + p] - max).exp();
                    data[(bi * c + ci) * plane + p] = e;
                    denom = denom + e;
                }
                for ci in 0..c {
                    data[(bi * c + ci) * plane + p] = data[(bi * c + ci) * plane + p] / denom;
                }
            }
        }
        let out = Tensor4::new([b, c, h, w], data).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::SoftmaxChannels { x }, needs)
    }

    /// Reinterprets `x` under a new shape with the same element count.
    pub fn reshape(&mut self, x: VarId, shape: [usize; 4]) -> Result<VarId> {
        let v = self.value(x);
        let from = v.shape();
        let out = v.clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape { x, from }, needs))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2(&mut self, x: VarId) -> VarId {
        let v = self.value(x);
        let [b, c, h, w] = v.shape();
        let mut data = vec![T::zero(); b * c * 4 * h * w];
        for bc in 0..b * c {
            let src = &v.data()[bc * h * w..(bc + 1) * h * w];
            let dst = &mut data[bc * 4 * h * w..(bc + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x2 in 0..2 * w {
                    dst[y * 2 * w + x2] = src[(y / 2) * w + x2 / 2];
                }
            }
        }
        let out = Tensor4::new([b, c, 2 * h, 2 * w], data).expect("sized above");
        let needs = self.needs(x);
        self.push(out, Op::Upsample2 { x }, needs)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(format!("mul shapes {sa:?} != {sb:?}")));
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor4::new(sa, data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: VarId, factor: T) -> VarId {
        let v = self.value(x);
        let out = Tensor4::new(v.shape(), v.iter().map(|&a| a * factor).collect()).unwrap();
        let needs = self.needs(x);
        self.push(out, Op::Scale { x, factor }, needs)
    }

    /// Reduces to a `(1,1,1,1)` scalar by summing all elements.
    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let total: T = self.value(x).iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor4::scalar(total), Op::SumAll { x }, needs)
    }

    /// Runs reverse-mode accumulation seeded at the scalar `loss`.
    ///
    /// Afterwards every recorded value that requires a gradient holds one
    /// (retrievable via [`Tape::grad`]); leaves flagged `requires_grad`
    /// that do not reach `loss` hold zeros.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward seed must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::scalar(T::one()));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &gout, &mut grads)?;
            // Interior grads are dropped once consumed; leaves keep theirs.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(gout);
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor4::zeros(node.value.shape()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(
        &self,
        id: usize,
        gout: &Tensor4<T>,
        grads: &mut Vec<Option<Tensor4<T>>>,
    ) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, cfg } => {
                let (dx, dw, db) = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    gout,
                    cfg,
                    self.needs(*x),
                    self.needs(*w),
                    b.map_or(false, |bv| self.needs(bv)),
                );
                if let Some(dx) = dx {
                    acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    acc(grads, *w, dw);
                }
                if let (Some(bv), Some(db)) = (b, db) {
                    acc(grads, *bv, db);
                }
            }
            Op::ConvTranspose2d { x, w, b, cfg } => {
                let (dx, dw, db) = conv::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    gout,
                    cfg,
                    self.needs(*x),
                    self.needs(*w),
                    b.map_or(false, |bv| self.needs(bv)),
                );
                if let Some(dx) = dx {
                    acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    acc(grads, *w, dw);
                }
                if let (Some(bv), Some(db)) = (b, db) {
                    acc(grads, *bv, db);
                }
            }
            Op::ConvSum { edges, bias } => {
                if let Some(bv) = bias {
                    if self.needs(*bv) {
                        let [bs, c, h, w] = gout.shape();
                        let plane = h * w;
                        let mut db = Tensor4::zeros([1, c, 1, 1]);
                        for bi in 0..bs {
                            for ci in 0..c {
                                let base = (bi * c + ci) * plane;
                                let s: T = gout.data()[base..base + plane].iter().copied().sum();
                                db.data_mut()[ci] = db.data_mut()[ci] + s;
                            }
                        }
                        acc(grads, *bv, db);
                    }
                }
                for e in edges {
                    let (need_x, need_w) = (self.needs(e.x), self.needs(e.w));
                    if !need_x && !need_w {
                        continue;
                    }
                    let (dx, dw) = match e.geom {
                        EdgeGeom::Conv(cfg) => {
                            let (dx, dw, _) = conv::conv2d_backward(
                                self.value(e.x),
                                self.value(e.w),
                                gout,
                                &cfg,
                                need_x,
                                need_w,
                                false,
                            );
                            (dx, dw)
                        }
                        EdgeGeom::Transpose(cfg) => {
                            let (dx, dw, _) = conv::conv_transpose2d_backward(
                                self.value(e.x),
                                self.value(e.w),
                                gout,
                                &cfg,
                                need_x,
                                need_w,
                                false,
                            );
                            (dx, dw)
                        }
                    };
                    if let Some(dx) = dx {
                        acc(grads, e.x, dx);
                    }
                    if let Some(dw) = dw {
                        acc(grads, e.w, dw);
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = Tensor4::zeros(self.value(*x).shape());
                for (o, &src) in argmax.iter().enumerate() {
                    let d = dx.data_mut();
                    d[src as usize] = d[src as usize] + gout.data()[o];
                }
                acc(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let (dx, dgamma, dbeta) = norm::batchnorm_backward(
                    self.value(*x),
                    self.value(*gamma),
                    gout,
                    saved,
                    self.needs(*x),
                );
                if let Some(dx) = dx {
                    acc(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    acc(grads, *gamma, dgamma);
                }
                if self.needs(*beta) {
                    acc(grads, *beta, dbeta);
                }
            }
            Op::Relu { x } => {
                let v = self.value(*x);
                let data = v
                    .iter()
                    .zip(gout.iter())
                    .map(|(&a, &g)| if a > T::zero() { g } else { T::zero() })
                    .collect();
                acc(grads, *x, Tensor4::new(v.shape(), data)?);
            }
            Op::Concat { xs } => {
                let [b, _, h, w] = gout.shape();
                let plane = h * w;
                let mut offset = 0;
                for &xi in xs {
                    let c = self.value(xi).channels();
                    let mut dx = Tensor4::zeros(self.value(xi).shape());
                    let total_c = gout.channels();
                    for bi in 0..b {
                        for ci in 0..c {
                            let src = (bi * total_c + offset + ci) * plane;
                            let dst = (bi * c + ci) * plane;
                            dx.data_mut()[dst..dst + plane]
                                .copy_from_slice(&gout.data()[src..src + plane]);
                        }
                    }
                    offset += c;
                    if self.needs(xi) {
                        acc(grads, xi, dx);
                    }
                }
            }
            Op::SumN { xs } => {
                for &xi in xs {
                    if self.needs(xi) {
                        acc(grads, xi, gout.clone());
                    }
                }
            }
            Op::BiasAdd { x, b } => {
                if self.needs(*x) {
                    acc(grads, *x, gout.clone());
                }
                if self.needs(*b) {
                    let [bs, c, h, w] = gout.shape();
                    let plane = h * w;
                    let mut db = Tensor4::zeros([1, c, 1, 1]);
                    for bi in 0..bs {
                        for ci in 0..c {
                            let base = (bi * c + ci) * plane;
                            let s: T = gout.data()[base..base + plane].iter().copied().sum();
                            db.data_mut()[ci] = db.data_mut()[ci] + s;
                        }
                    }
                    acc(grads, *b, db);
                }
            }
            Op::SoftmaxChannels { x } => {
                // dz = p * (dy - sum_c(dy * p)) per pixel.
                let p = &self.nodes[id].value;
                let [b, c, h, w] = p.shape();
                let plane = h * w;
                let mut dx = Tensor4::zeros(p.shape());
                for bi in 0..b {
                    for pix in 0..plane {
                        let mut dot = T::zero();
                        for ci in 0..c {
                            let idx = (bi * c + ci) * plane + pix;
                            dot = dot + gout.data()[idx] * p.data()[idx];
                        }
                        for ci in 0..c {
                            let idx = (bi * c + ci) * plane + pix;
                            dx.data_mut()[idx] = p.data()[idx] * (gout.data()[idx] - dot);
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Reshape { x, from } => {
                acc(grads, *x, gout.clone().reshaped(*from)?);
            }
            Op::Upsample2 { x } => {
                let v = self.value(*x);
                let [b, c, h, w] = v.shape();
                let mut dx = Tensor4::zeros(v.shape());
                for bc in 0..b * c {
                    let g = &gout.data()[bc * 4 * h * w..(bc + 1) * 4 * h * w];
                    let d = &mut dx.data_mut()[bc * h * w..(bc + 1) * h * w];
                    for y in 0..2 * h {
                        for x2 in 0..2 * w {
                            d[(y / 2) * w + x2 / 2] = d[(y / 2) * w + x2 / 2] + g[y * 2 * w + x2];
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let data = gout
                        .iter()
                        .zip(self.value(*b).iter())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    acc(grads, *a, Tensor4::new(gout.shape(), data)?);
                }
                if self.needs(*b) {
                    let data = gout
                        .iter()
                        .zip(self.value(*a).iter())
                        .map(|(&g, &x)| g * x)
                        .collect();
                    acc(grads, *b, Tensor4::new(gout.shape(), data)?);
                }
            }
            Op::Scale { x, factor } => {
                let data = gout.iter().map(|&g| g * *factor).collect();
                acc(grads, *x, Tensor4::new(gout.shape(), data)?);
            }
            Op::SumAll { x } => {
                let g = gout.data()[0];
                acc(grads, *x, Tensor4::full(self.value(*x).shape(), g));
            }
            Op::CrossEntropy(saved) => {
                let dx = loss_ops::cross_entropy_backward(saved, gout.data()[0]);
                acc(grads, saved.input, dx);
            }
            Op::Focal {
                saved,
                gamma,
                class_weights,
            } => {
                let dx = loss_ops::focal_backward(saved, *gamma, class_weights.as_deref(), gout.data()[0]);
                acc(grads, saved.input, dx);
            }
            Op::Dice { saved, terms } => {
                let dx = loss_ops::dice_backward(saved, terms, gout.data()[0]);
                acc(grads, saved.input, dx);
            }
            Op::Tversky {
                saved,
                alpha,
                beta,
                terms,
            } => {
                let dx = loss_ops::tversky_backward(saved, *alpha, *beta, terms, gout.data()[0]);
                acc(grads, saved.input, dx);
            }
            Op::Mse {
                x,
                target,
                mask,
                included,
            } => {
                let dx = loss_ops::mse_backward(
                    self.value(*x),
                    target,
                    mask.as_ref(),
                    *included,
                    gout.data()[0],
                );
                acc(grads, *x, dx);
            }
        }
        Ok(())
    }
}

fn acc<T: Element>(grads: &mut [Option<Tensor4<T>>], id: VarId, delta: Tensor4<T>) {
    match &mut grads[id.0] {
        Some(g) => {
            for (a, &d) in g.data_mut().iter_mut().zip(delta.iter()) {
                *a = *a + d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Central finite differences of a scalar function, `(f(x+eps e) - f(x-eps e)) / (2 eps)`
/// per element. Test oracle for [`Tape::backward`].
pub fn finite_diff_grad<T: Element>(
    f: &mut dyn FnMut(&Tensor4<T>) -> T,
    x: &Tensor4<T>,
    eps: T,
) -> Tensor4<T> {
    let mut probe = x.clone();
    let mut grad = Tensor4::zeros(x.shape());
    let two = T::one() + T::one();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (two * eps);
    }
    grad
}

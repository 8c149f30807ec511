use super::norm::{self, BnSaved, BnStats};
use super::{conv, pool, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm behaviour for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by batch statistics and update the running estimates.
    Train,
    /// Normalize by the running estimates.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Channel,
    Spatial,
}

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: conv::ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample { x: Var, scale: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: BnSaved<T> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var },
    GlobalAvgPool { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var, kind: Broadcast },
    Concat { a: Var, b: Var },
    Scale { x: Var, k: T },
    Sum { x: Var },
    Loss { probs: Var, grad: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradient tape: an append-only record of operations in execution order.
///
/// Inputs always precede outputs, so replaying the record backwards visits
/// every node after all of its consumers.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a leaf; `requires_grad` leaves receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let bias = b.map(|b| self.value(b));
        let (out, geom) = conv::forward(self.value(x), self.value(w), bias, stride, padding)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv { x, w, b, geom }, rg))
    }

    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (out, argmax) = pool::maxpool_forward(self.value(x), kernel, stride, padding)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    pub fn nearest_upsample(&mut self, x: Var, scale: usize) -> Result<Var> {
        let out = pool::upsample_forward(self.value(x), scale)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample { x, scale }, rg))
    }

    /// Batch normalization over `(N, H, W)` per channel.
    ///
    /// In [`BnMode::Train`] `stats` receives an exponential moving average
    /// update with the given momentum; in [`BnMode::Eval`] it is read only.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats<T>,
        mode: BnMode,
        eps: T,
        momentum: T,
    ) -> Result<Var> {
        let running = match mode {
            BnMode::Train => None,
            BnMode::Eval if stats.batches == 0 => return Err(Error::UninitializedStats("batchnorm2d".into())),
            BnMode::Eval => Some(&*stats),
        };
        let (out, saved, batch) =
            norm::forward(self.value(x), self.value(gamma).data(), self.value(beta).data(), running, eps)?;
        if let Some((mean, var)) = batch {
            let keep = T::one() - momentum;
            for (r, b) in stats.mean.iter_mut().zip(mean) {
                *r = keep * *r + momentum * b;
            }
            for (r, b) in stats.var.iter_mut().zip(var) {
                *r = keep * *r + momentum * b;
            }
            stats.batches += 1;
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, saved }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    /// Softmax across the channel axis of an NCHW tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax_channels(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let inv = T::of(1.0 / (h * w) as f64);
        let data = self.value(x).data().chunks_exact(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::new(&[n, c, 1, 1], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GlobalAvgPool { x }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Elementwise product. `b` may match `a`, or be `[N,C,1,1]` (per
    /// channel) or `[N,1,H,W]` (per pixel) against an NCHW `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(va.shape(), vb.shape())?;
        let mut out = va.data().to_vec();
        match kind {
            Broadcast::Same => out.iter_mut().zip(vb.data()).for_each(|(o, &s)| *o *= s),
            Broadcast::Channel => {
                let hw = va.shape()[2] * va.shape()[3];
                for (plane, &s) in out.chunks_exact_mut(hw).zip(vb.data()) {
                    plane.iter_mut().for_each(|o| *o *= s);
                }
            }
            Broadcast::Spatial => {
                let (c, hw) = (va.shape()[1], va.shape()[2] * va.shape()[3]);
                for (sample, gate) in out.chunks_exact_mut(c * hw).zip(vb.data().chunks_exact(hw)) {
                    for plane in sample.chunks_exact_mut(hw) {
                        plane.iter_mut().zip(gate).for_each(|(o, &s)| *o *= s);
                    }
                }
            }
        }
        let out = Tensor::new(va.shape(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a, b, kind }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::Shape(format!("concat_channels: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let hw = ha * wa;
        let mut data = Vec::with_capacity(na * (ca + cb) * hw);
        for n in 0..na {
            data.extend_from_slice(&self.value(a).data()[n * ca * hw..(n + 1) * ca * hw]);
            data.extend_from_slice(&self.value(b).data()[n * cb * hw..(n + 1) * cb * hw]);
        }
        let out = Tensor::new(&[na, ca + cb, ha, wa], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).map(|v| v * k);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, k }, rg)
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum { x }, rg)
    }

    /// Records a scalar loss of `probs` whose gradient was computed alongside
    /// its value.
    pub(crate) fn loss_node(&mut self, probs: Var, value: T, grad: Vec<T>) -> Var {
        debug_assert_eq!(grad.len(), self.value(probs).numel());
        let rg = self.rg(probs);
        self.push(Tensor::scalar(value), Op::Loss { probs, grad }, rg)
    }

    /// Reverse-mode sweep from a one-element `loss`. Gradients of earlier
    /// backward calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else { continue };
            self.apply_rule(i, &gy);
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    /// Zero gradient buffer for `v`, or `None` when it needs no gradient.
    fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        Some(self.grads[v.0].take().unwrap_or_else(|| vec![T::zero(); self.nodes[v.0].value.numel()]))
    }

    fn put_grad(&mut self, v: Var, g: Option<Vec<T>>) {
        let Some(g) = g else { return };
        match &mut self.grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, &d)| *e += d),
            slot => *slot = Some(g),
        }
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [T], &Tensor<T>)) {
        if let Some(mut g) = self.take_grad(v) {
            f(&mut g, &self.nodes[v.0].value);
            self.put_grad(v, Some(g));
        }
    }

    fn apply_rule(&mut self, i: usize, gy: &[T]) {
        // Detach the op so the node's saved context can be read while input
        // gradients are mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let (x, w, b) = (*x, *w, *b);
                let mut dx = self.take_grad(x);
                let mut dw = self.take_grad(w);
                let mut db = b.and_then(|b| self.take_grad(b));
                conv::backward(
                    geom,
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    gy,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.put_grad(x, dx);
                self.put_grad(w, dw);
                if let Some(b) = b {
                    self.put_grad(b, db);
                }
            }
            Op::MaxPool { x, argmax } => self.accumulate(*x, |g, _| {
                for (&src, &d) in argmax.iter().zip(gy) {
                    g[src] += d;
                }
            }),
            Op::Upsample { x, scale } => self.accumulate(*x, |g, v| pool::upsample_backward(gy, v.shape(), *scale, g)),
            Op::BatchNorm { x, gamma, beta, saved } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let mut dx = self.take_grad(x);
                let mut dg = self.take_grad(gamma);
                let mut db = self.take_grad(beta);
                norm::backward(
                    self.nodes[x.0].value.shape(),
                    saved,
                    self.nodes[gamma.0].value.data(),
                    gy,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.put_grad(x, dx);
                self.put_grad(gamma, dg);
                self.put_grad(beta, db);
            }
            Op::Relu { x } => self.accumulate(*x, |g, v| {
                for ((g, &xv), &d) in g.iter_mut().zip(v.data()).zip(gy) {
                    if xv > T::zero() {
                        *g += d;
                    }
                }
            }),
            Op::Sigmoid { x } => {
                let y = self.nodes[i].value.data().to_vec();
                self.accumulate(*x, |g, _| {
                    for ((g, &yv), &d) in g.iter_mut().zip(&y).zip(gy) {
                        *g += d * yv * (T::one() - yv);
                    }
                })
            }
            Op::Softmax { x } => {
                let y = self.nodes[i].value.clone();
                self.accumulate(*x, |g, _| {
                    let (n, c, h, w) = y.dims4().expect("softmax output is NCHW");
                    let hw = h * w;
                    let yd = y.data();
                    for b in 0..n {
                        let base = b * c * hw;
                        for p in 0..hw {
                            let dot: T = (0..c).map(|ch| gy[base + ch * hw + p] * yd[base + ch * hw + p]).sum();
                            for ch in 0..c {
                                let k = base + ch * hw + p;
                                g[k] += yd[k] * (gy[k] - dot);
                            }
                        }
                    }
                })
            }
            Op::GlobalAvgPool { x } => self.accumulate(*x, |g, v| {
                let hw = v.shape()[2] * v.shape()[3];
                let inv = T::of(1.0 / hw as f64);
                for (plane, &d) in g.chunks_exact_mut(hw).zip(gy) {
                    plane.iter_mut().for_each(|e| *e += d * inv);
                }
            }),
            Op::Add { a, b } => {
                self.accumulate(*a, |g, _| g.iter_mut().zip(gy).for_each(|(e, &d)| *e += d));
                self.accumulate(*b, |g, _| g.iter_mut().zip(gy).for_each(|(e, &d)| *e += d));
            }
            Op::Mul { a, b, kind } => {
                let (a, b, kind) = (*a, *b, *kind);
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                let (c, hw) =
                    if kind == Broadcast::Same { (1, 1) } else { (va.shape()[1], va.shape()[2] * va.shape()[3]) };
                self.accumulate(a, |g, _| match kind {
                    Broadcast::Same => {
                        for ((e, &d), &s) in g.iter_mut().zip(gy).zip(vb.data()) {
                            *e += d * s;
                        }
                    }
                    Broadcast::Channel => {
                        for ((plane, dplane), &s) in g.chunks_exact_mut(hw).zip(gy.chunks_exact(hw)).zip(vb.data()) {
                            plane.iter_mut().zip(dplane).for_each(|(e, &d)| *e += d * s);
                        }
                    }
                    Broadcast::Spatial => {
                        for ((sample, dsample), gate) in
                            g.chunks_exact_mut(c * hw).zip(gy.chunks_exact(c * hw)).zip(vb.data().chunks_exact(hw))
                        {
                            for (plane, dplane) in sample.chunks_exact_mut(hw).zip(dsample.chunks_exact(hw)) {
                                for ((e, &d), &s) in plane.iter_mut().zip(dplane).zip(gate) {
                                    *e += d * s;
                                }
                            }
                        }
                    }
                });
                self.accumulate(b, |g, _| match kind {
                    Broadcast::Same => {
                        for ((e, &d), &s) in g.iter_mut().zip(gy).zip(va.data()) {
                            *e += d * s;
                        }
                    }
                    Broadcast::Channel => {
                        for ((e, dplane), aplane) in
                            g.iter_mut().zip(gy.chunks_exact(hw)).zip(va.data().chunks_exact(hw))
                        {
                            *e += dplane.iter().zip(aplane).map(|(&d, &s)| d * s).sum::<T>();
                        }
                    }
                    Broadcast::Spatial => {
                        for ((gate, dsample), asample) in
                            g.chunks_exact_mut(hw).zip(gy.chunks_exact(c * hw)).zip(va.data().chunks_exact(c * hw))
                        {
                            for (dplane, aplane) in dsample.chunks_exact(hw).zip(asample.chunks_exact(hw)) {
                                for ((e, &d), &s) in gate.iter_mut().zip(dplane).zip(aplane) {
                                    *e += d * s;
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat { a, b } => {
                let (a, b) = (*a, *b);
                let (n, ca, h, w) = self.nodes[a.0].value.dims4().expect("concat input is NCHW");
                let cb = self.nodes[b.0].value.shape()[1];
                let hw = h * w;
                self.accumulate(a, |g, _| {
                    for s in 0..n {
                        let src = &gy[s * (ca + cb) * hw..][..ca * hw];
                        g[s * ca * hw..][..ca * hw].iter_mut().zip(src).for_each(|(e, &d)| *e += d);
                    }
                });
                self.accumulate(b, |g, _| {
                    for s in 0..n {
                        let src = &gy[(s * (ca + cb) + ca) * hw..][..cb * hw];
                        g[s * cb * hw..][..cb * hw].iter_mut().zip(src).for_each(|(e, &d)| *e += d);
                    }
                });
            }
            Op::Scale { x, k } => {
                let k = *k;
                self.accumulate(*x, |g, _| g.iter_mut().zip(gy).for_each(|(e, &d)| *e += d * k))
            }
            Op::Sum { x } => {
                let d = gy[0];
                self.accumulate(*x, |g, _| g.iter_mut().for_each(|e| *e += d))
            }
            Op::Loss { probs, grad } => {
                let d = gy[0];
                self.accumulate(*probs, |g, _| g.iter_mut().zip(grad).for_each(|(e, &v)| *e += d * v))
            }
        }
        self.nodes[i].op = op;
    }
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    match (a, b) {
        ([n, c, _, _], [bn, bc, 1, 1]) if n == bn && c == bc => Ok(Broadcast::Channel),
        ([n, _, h, w], [bn, 1, bh, bw]) if n == bn && h == bh && w == bw => Ok(Broadcast::Spatial),
        _ => Err(Error::Shape(format!("mul: cannot broadcast {b:?} against {a:?}"))),
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let max = (0..c).map(|ch| xd[base + ch * hw + p]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for ch in 0..c {
                let e = (xd[base + ch * hw + p] - max).exp();
                out[base + ch * hw + p] = e;
                z += e;
            }
            for ch in 0..c {
                out[base + ch * hw + p] = out[base + ch * hw + p] / z;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

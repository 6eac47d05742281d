//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward value and
//! the information needed to propagate gradients. Nodes are created in topological
//! order, so [`Graph::backward`] walks the tape once in reverse.

use crate::error::{Error, Result};
use crate::kernels::{self, BatchNormSaved, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    AvgPool { x: Var, k: usize },
    GlobalAvgPool { x: Var },
    Upsample { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var, outer: usize, dim: usize, inner: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    MulBcast { x: Var, s: Var, strides: [usize; 4] },
    Concat { xs: Vec<Var> },
    Reshape { x: Var },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: BatchNormSaved<T> },
    Bce { p: Var, target: Tensor<T>, eps: T },
    Cce { p: Var, labels: Vec<u32>, eps: T },
    Mse { p: Var, target: Tensor<T> },
    Dcd { p: Var, residual: Tensor<T>, dilation: usize, border: usize, scale: T },
    WeightedSum { terms: Vec<(Var, T)> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Autodiff tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient (inputs, targets, fixed matrices).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Batch mean and variance used by a training-mode batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { saved, .. } if saved.train => Some((&saved.mean, &saved.var)),
            _ => None,
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("conv2d input {xs:?} vs weight {ws:?}")));
        }
        if geom.out_size(xs[2], ws[2]) == 0 || geom.out_size(xs[3], ws[3]) == 0 {
            return Err(Error::Shape(format!("conv2d kernel {ws:?} larger than padded input {xs:?}")));
        }
        let value = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            geom,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::Shape(format!("2x2 max pool needs even spatial dims, got {s:?}")));
        }
        let (value, argmax) = kernels::maxpool2_forward(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        if k == 1 {
            return Ok(x);
        }
        let s = self.shape(x);
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(Error::Shape(format!("{k}x{k} average pool does not tile {s:?}")));
        }
        let value = kernels::avgpool_forward(self.value(x), k);
        let rg = self.rg(x);
        Ok(self.push(value, Op::AvgPool { x, k }, rg))
    }

    /// Mean over the spatial axes, keeping them as size 1.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let inv = T::one() / T::from_usize_lossy(h * w);
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::from_vec(&[n, c, 1, 1], data).expect("shape");
        let rg = self.rg(x);
        self.push(value, Op::GlobalAvgPool { x }, rg)
    }

    /// Bilinear resize of the spatial axes.
    pub fn upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let s = self.shape(x);
        if s[2] == out_h && s[3] == out_w {
            return x;
        }
        let value = kernels::upsample_forward(self.value(x), out_h, out_w);
        let rg = self.rg(x);
        self.push(value, Op::Upsample { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let s = self.shape(x);
        let outer = s[..axis].iter().product();
        let dim = s[axis];
        let inner = s[axis + 1..].iter().product();
        let value = kernels::softmax_forward(self.value(x), outer, dim, inner);
        let rg = self.rg(x);
        self.push(value, Op::Softmax { x, outer, dim, inner }, rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        for (o, v) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += *v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let mut value = self.value(a).clone();
        for (o, v) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= *v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut value = self.value(a).clone();
        for (o, v) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= *v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, s }, rg)
    }

    /// Elementwise product with `s` broadcast over its size-1 axes (rank 4).
    pub fn mul_bcast(&mut self, x: Var, s: Var) -> Result<Var> {
        let strides =
            kernels::broadcast_strides(self.shape(s), self.shape(x)).map_err(Error::Shape)?;
        let value = kernels::mul_bcast_forward(self.value(x), self.value(s), strides);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::MulBcast { x, s, strides }, rg))
    }

    /// Concatenation along the channel axis of rank-4 tensors.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]).dims4();
        let mut channels = 0;
        for &x in xs {
            let (n, c, h, w) = self.value(x).dims4();
            if (n, h, w) != (first.0, first.2, first.3) {
                return Err(Error::Shape(format!(
                    "concat: {:?} vs {:?}",
                    self.shape(x),
                    self.shape(xs[0])
                )));
            }
            channels += c;
        }
        let (n, _, h, w) = first;
        let mut value = Tensor::zeros(&[n, channels, h, w]);
        let plane = h * w;
        let mut offset = 0;
        for &x in xs {
            let c = self.shape(x)[1];
            for item in 0..n {
                let src = &self.nodes[x.0].value.data()[item * c * plane..(item + 1) * c * plane];
                let dst_start = (item * channels + offset) * plane;
                value.data_mut()[dst_start..dst_start + c * plane].copy_from_slice(src);
            }
            offset += c;
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(value, Op::Concat { xs: xs.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Batched matrix product `op(a) @ op(b)`; a rank-2 operand (or batch 1) is shared.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        kernels::bmm_shape(self.shape(a), self.shape(b), ta, tb).map_err(Error::Shape)?;
        let value = kernels::bmm_forward(self.value(a), self.value(b), ta, tb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Bmm { a, b, ta, tb }, rg))
    }

    /// Batch normalization over (N, H, W); `running` selects inference statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Var {
        let (value, saved) = kernels::batchnorm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running,
            eps,
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(value, Op::BatchNorm { x, gamma, beta, saved }, rg)
    }

    /// Mean binary cross-entropy of probabilities `p` against a 0/1 target.
    pub fn bce_mean(&mut self, p: Var, target: &Tensor<T>, eps: T) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(Error::Shape(format!("bce: {:?} vs {:?}", self.shape(p), target.shape())));
        }
        let hi = T::one() - eps;
        let mut total = T::zero();
        for (&pv, &t) in self.value(p).data().iter().zip(target.data()) {
            let pc = pv.max(eps).min(hi);
            total -= t * pc.ln() + (T::one() - t) * (T::one() - pc).ln();
        }
        let value = Tensor::scalar(total / T::from_usize_lossy(target.numel()));
        let rg = self.rg(p);
        Ok(self.push(value, Op::Bce { p, target: target.clone(), eps }, rg))
    }

    /// Mean categorical cross-entropy of per-pixel class probabilities
    /// (`N x L x H x W`) against 1-based labels (`N x H x W`).
    pub fn cce_mean(&mut self, p: Var, labels: &[u32], eps: T) -> Result<Var> {
        let (n, classes, h, w) = self.value(p).dims4();
        if labels.len() != n * h * w {
            return Err(Error::Shape(format!(
                "cce: {} labels for probabilities {:?}",
                labels.len(),
                self.shape(p)
            )));
        }
        let plane = h * w;
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            if label == 0 || label as usize > classes {
                return Err(Error::ClassOutOfRange { class: label as usize, classes });
            }
            let (item, px) = (i / plane, i % plane);
            let pv = self.value(p).data()[(item * classes + label as usize - 1) * plane + px];
            total -= pv.max(eps).min(T::one()).ln();
        }
        let value = Tensor::scalar(total / T::from_usize_lossy(labels.len()));
        let rg = self.rg(p);
        Ok(self.push(value, Op::Cce { p, labels: labels.to_vec(), eps }, rg))
    }

    /// Mean squared error against a constant target.
    pub fn mse_mean(&mut self, p: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(Error::Shape(format!("mse: {:?} vs {:?}", self.shape(p), target.shape())));
        }
        let total: T = self
            .value(p)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let value = Tensor::scalar(total / T::from_usize_lossy(target.numel()));
        let rg = self.rg(p);
        Ok(self.push(value, Op::Mse { p, target: target.clone() }, rg))
    }

    /// Dilated-contrast energy of `p - target`, multiplied by `scale`.
    pub fn dcd(
        &mut self,
        p: Var,
        target: &Tensor<T>,
        dilation: usize,
        border: usize,
        mean: bool,
    ) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(Error::Shape(format!("dcd: {:?} vs {:?}", self.shape(p), target.shape())));
        }
        let mut residual = self.value(p).clone();
        for (r, t) in residual.data_mut().iter_mut().zip(target.data()) {
            *r -= *t;
        }
        let (energy, pixels) = kernels::dcd_energy(&residual, dilation, border);
        let scale = if mean && pixels > 0 {
            T::one() / T::from_usize_lossy(pixels)
        } else {
            T::one()
        };
        let value = Tensor::scalar(energy * scale);
        let rg = self.rg(p);
        Ok(self.push(value, Op::Dcd { p, residual, dilation, border, scale }, rg))
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let total = terms.iter().fold(T::zero(), |acc, &(v, w)| acc + w * self.value(v).data()[0]);
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(Tensor::scalar(total), Op::WeightedSum { terms: terms.to_vec() }, rg)
    }

    /// Gradients of the scalar `loss` with respect to all leaves created by [`Graph::param`].
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += *x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let g = kernels::conv2d_backward(self.value(*x), self.value(*w), gy, *geom, need);
                if let Some(dx) = g.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = g.dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, g.db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let dx = kernels::maxpool2_backward(self.shape(*x), gy, argmax);
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool { x, k } => {
                let dx = kernels::avgpool_backward(self.shape(*x), gy, *k);
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let shape = self.shape(*x);
                let plane = shape[2] * shape[3];
                let inv = T::one() / T::from_usize_lossy(plane);
                let data = gy.data().iter().flat_map(|&g| std::iter::repeat_n(g * inv, plane)).collect();
                self.accumulate(grads, *x, Tensor::from_vec(shape, data).expect("shape"));
            }
            Op::Upsample { x } => {
                let dx = kernels::upsample_backward(self.shape(*x), gy);
                self.accumulate(grads, *x, dx);
            }
            Op::Relu { x } => {
                let mut dx = gy.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(out.data()) {
                    if y <= T::zero() {
                        *d = T::zero();
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let mut dx = gy.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(out.data()) {
                    *d *= y * (T::one() - y);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax { x, outer, dim, inner } => {
                let dx = kernels::softmax_backward(out, gy, *outer, *dim, *inner);
                self.accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|v| -v));
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let mut da = gy.clone();
                    for (d, &v) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *d *= v;
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = gy.clone();
                    for (d, &v) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *d *= v;
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale { x, s } => {
                let s = *s;
                self.accumulate(grads, *x, gy.map(|v| v * s));
            }
            Op::MulBcast { x, s, strides } => {
                let (dx, ds) = kernels::mul_bcast_backward(
                    self.value(*x),
                    self.value(*s),
                    gy,
                    *strides,
                    (self.rg(*x), self.rg(*s)),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(ds) = ds {
                    self.accumulate(grads, *s, ds);
                }
            }
            Op::Concat { xs } => {
                let (n, channels, h, w) = gy.dims4();
                let plane = h * w;
                let mut offset = 0;
                for &x in xs {
                    let c = self.shape(x)[1];
                    if self.rg(x) {
                        let mut dx = Tensor::zeros(self.shape(x));
                        for item in 0..n {
                            let src_start = (item * channels + offset) * plane;
                            dx.data_mut()[item * c * plane..(item + 1) * c * plane]
                                .copy_from_slice(&gy.data()[src_start..src_start + c * plane]);
                        }
                        self.accumulate(grads, x, dx);
                    }
                    offset += c;
                }
            }
            Op::Reshape { x } => {
                let dx = gy.clone().reshape(self.shape(*x)).expect("same numel");
                self.accumulate(grads, *x, dx);
            }
            Op::Bmm { a, b, ta, tb } => {
                let (da, db) = kernels::bmm_backward(
                    self.value(*a),
                    self.value(*b),
                    gy,
                    *ta,
                    *tb,
                    (self.rg(*a), self.rg(*b)),
                );
                if let Some(da) = da {
                    self.accumulate(grads, *a, da);
                }
                if let Some(db) = db {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let (dx, dg, db) = kernels::batchnorm_backward(gy, self.value(*gamma), saved);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::Bce { p, target, eps } => {
                let g = gy.data()[0] / T::from_usize_lossy(target.numel());
                let hi = T::one() - *eps;
                let data = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&pv, &t)| {
                        if pv < *eps || pv > hi {
                            T::zero()
                        } else {
                            -g * (t / pv - (T::one() - t) / (T::one() - pv))
                        }
                    })
                    .collect();
                self.accumulate(grads, *p, Tensor::from_vec(self.shape(*p), data).expect("shape"));
            }
            Op::Cce { p, labels, eps } => {
                let (_, classes, h, w) = self.value(*p).dims4();
                let plane = h * w;
                let g = gy.data()[0] / T::from_usize_lossy(labels.len());
                let mut dp = Tensor::zeros(self.shape(*p));
                for (i, &label) in labels.iter().enumerate() {
                    let idx = ((i / plane) * classes + label as usize - 1) * plane + i % plane;
                    let pv = self.value(*p).data()[idx];
                    if pv >= *eps {
                        dp.data_mut()[idx] = -g / pv;
                    }
                }
                self.accumulate(grads, *p, dp);
            }
            Op::Mse { p, target } => {
                let g = T::of(2.0) * gy.data()[0] / T::from_usize_lossy(target.numel());
                let data = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| g * (a - b))
                    .collect();
                self.accumulate(grads, *p, Tensor::from_vec(self.shape(*p), data).expect("shape"));
            }
            Op::Dcd { p, residual, dilation, border, scale } => {
                let s = *scale * gy.data()[0];
                let dp = kernels::dcd_energy_grad(residual, *dilation, *border, s);
                self.accumulate(grads, *p, dp);
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::scalar(w * gy.data()[0]));
                }
            }
        }
    }
}

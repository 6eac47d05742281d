//! Forward and backward kernels over raw tensors. The autodiff graph wires these together.

use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Geometry of a stride-1 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad).saturating_sub(self.dilation * (kernel - 1))
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeom,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let plane = ho * wo;
    let pad = geom.pad as isize;
    let dil = geom.dilation as isize;
    for c in 0..channels {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let dx = kj as isize * dil - pad;
                // Valid output columns satisfy 0 <= ox + dx < w.
                let ox_lo = (-dx).clamp(0, wo as isize) as usize;
                let ox_hi = (w as isize - dx).clamp(0, wo as isize) as usize;
                for oy in 0..ho {
                    let iy = oy as isize + ki as isize * dil - pad;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize || ox_lo >= ox_hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    out_row[..ox_lo].fill(T::zero());
                    let start = (ox_lo as isize + dx) as usize;
                    out_row[ox_lo..ox_hi].copy_from_slice(&src[start..start + (ox_hi - ox_lo)]);
                    out_row[ox_hi..].fill(T::zero());
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeom,
    ho: usize,
    wo: usize,
    dx_out: &mut [T],
) {
    let plane = ho * wo;
    let pad = geom.pad as isize;
    let dil = geom.dilation as isize;
    for c in 0..channels {
        let xc = &mut dx_out[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                let dx = kj as isize * dil - pad;
                let ox_lo = (-dx).clamp(0, wo as isize) as usize;
                let ox_hi = (w as isize - dx).clamp(0, wo as isize) as usize;
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..ho {
                    let iy = oy as isize + ki as isize * dil - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    let start = (ox_lo as isize + dx) as usize;
                    for (d, s) in dst[start..start + (ox_hi - ox_lo)]
                        .iter_mut()
                        .zip(&src[oy * wo + ox_lo..oy * wo + ox_hi])
                    {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Stride-1 convolution (cross-correlation). `x`: N x C x H x W, `w`: O x C x kh x kw.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Tensor<T> {
    let (n, c, h, wd) = x.dims4();
    let (oc, ic, kh, kw) = w.dims4();
    assert_eq!(c, ic, "conv input has {c} channels, weight expects {ic}");
    let ho = geom.out_size(h, kh);
    let wo = geom.out_size(wd, kw);
    let plane = ho * wo;
    let ckk = c * kh * kw;
    let pointwise = kh == 1 && kw == 1 && geom.pad == 0;
    let mut out = Tensor::zeros(&[n, oc, ho, wo]);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); ckk * plane] };
    for item in 0..n {
        let xn = &x.data()[item * c * h * wd..(item + 1) * c * h * wd];
        let cols: &[T] = if pointwise {
            xn
        } else {
            im2col(xn, c, h, wd, kh, kw, geom, ho, wo, &mut col);
            &col
        };
        let yn = &mut out.data_mut()[item * oc * plane..(item + 1) * oc * plane];
        if let Some(bias) = b {
            for (o, chunk) in yn.chunks_mut(plane).enumerate() {
                chunk.fill(bias.data()[o]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(T::one(), MatRef::new(w.data(), oc, ckk), MatRef::new(cols, ckk, plane), beta, yn);
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    geom: ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (n, c, h, wd) = x.dims4();
    let (oc, _, kh, kw) = w.dims4();
    let (_, _, ho, wo) = gy.dims4();
    let plane = ho * wo;
    let ckk = c * kh * kw;
    let pointwise = kh == 1 && kw == 1 && geom.pad == 0;
    let (need_dx, need_dw, need_db) = need;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = need_db.then(|| Tensor::zeros(&[oc]));
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); ckk * plane] };
    let mut dcol = if pointwise || !need_dx { Vec::new() } else { vec![T::zero(); ckk * plane] };
    for item in 0..n {
        let gyn = &gy.data()[item * oc * plane..(item + 1) * oc * plane];
        if let Some(db) = db.as_mut() {
            for (o, chunk) in gyn.chunks(plane).enumerate() {
                db.data_mut()[o] += chunk.iter().copied().sum::<T>();
            }
        }
        let xn = &x.data()[item * c * h * wd..(item + 1) * c * h * wd];
        if let Some(dw) = dw.as_mut() {
            let cols: &[T] = if pointwise {
                xn
            } else {
                im2col(xn, c, h, wd, kh, kw, geom, ho, wo, &mut col);
                &col
            };
            gemm(
                T::one(),
                MatRef::new(gyn, oc, plane),
                MatRef::new(cols, ckk, plane).t(),
                T::one(),
                dw.data_mut(),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx.data_mut()[item * c * h * wd..(item + 1) * c * h * wd];
            if pointwise {
                gemm(
                    T::one(),
                    MatRef::new(w.data(), oc, ckk).t(),
                    MatRef::new(gyn, oc, plane),
                    T::zero(),
                    dxn,
                );
            } else {
                gemm(
                    T::one(),
                    MatRef::new(w.data(), oc, ckk).t(),
                    MatRef::new(gyn, oc, plane),
                    T::zero(),
                    &mut dcol,
                );
                col2im(&dcol, c, h, wd, kh, kw, geom, ho, wo, dxn);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// 2x2 max pooling with stride 2; returns the pooled map and flat argmax indices.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0u32; n * c * ho * wo];
    let xd = x.data();
    let od = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                let o = plane * ho * wo + oy * wo + ox;
                od[o] = xd[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(x_shape: &[usize], gy: &Tensor<T>, arg: &[u32]) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    let d = dx.data_mut();
    for (g, &a) in gy.data().iter().zip(arg) {
        d[a as usize] += *g;
    }
    dx
}

/// Non-overlapping `k x k` average pooling.
pub fn avgpool_forward<T: Scalar>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h / k, w / k);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let inv = T::one() / T::from_usize_lossy(k * k);
    let xd = x.data();
    let od = out.data_mut();
    for plane in 0..n * c {
        for y in 0..ho * k {
            for xx in 0..wo * k {
                od[plane * ho * wo + (y / k) * wo + xx / k] += xd[plane * h * w + y * w + xx] * inv;
            }
        }
    }
    out
}

pub fn avgpool_backward<T: Scalar>(x_shape: &[usize], gy: &Tensor<T>, k: usize) -> Tensor<T> {
    let (_, _, ho, wo) = gy.dims4();
    let (h, w) = (x_shape[2], x_shape[3]);
    let planes = x_shape[0] * x_shape[1];
    let mut dx = Tensor::zeros(x_shape);
    let inv = T::one() / T::from_usize_lossy(k * k);
    let gd = gy.data();
    let dd = dx.data_mut();
    for plane in 0..planes {
        for y in 0..ho * k {
            for xx in 0..wo * k {
                dd[plane * h * w + y * w + xx] = gd[plane * ho * wo + (y / k) * wo + xx / k] * inv;
            }
        }
    }
    dx
}

/// Source taps for half-pixel-centred bilinear resampling along one axis.
fn bilinear_taps<T: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, T, T)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let l1 = pos - i0 as f64;
            (i0, i1, T::of(1.0 - l1), T::of(l1))
        })
        .collect()
}

/// Bilinear resize to `(out_h, out_w)` with half-pixel centres (no corner alignment).
pub fn upsample_forward<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let ty = bilinear_taps::<T>(h, out_h);
    let tx = bilinear_taps::<T>(w, out_w);
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let xd = x.data();
    let od = out.data_mut();
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        let dst = &mut od[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * out_w + ox] =
                    wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
    out
}

pub fn upsample_backward<T: Scalar>(x_shape: &[usize], gy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (_, _, out_h, out_w) = gy.dims4();
    let ty = bilinear_taps::<T>(h, out_h);
    let tx = bilinear_taps::<T>(w, out_w);
    let mut dx = Tensor::zeros(x_shape);
    let gd = gy.data();
    let dd = dx.data_mut();
    for plane in 0..n * c {
        let g = &gd[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        let d = &mut dd[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                d[y0 * w + x0] += v * wy0 * wx0;
                d[y0 * w + x1] += v * wy0 * wx1;
                d[y1 * w + x0] += v * wy1 * wx0;
                d[y1 * w + x1] += v * wy1 * wx1;
            }
        }
    }
    dx
}

/// Batch-norm statistics and normalized activations retained for the backward pass.
pub struct BatchNormSaved<T> {
    pub xhat: Vec<T>,
    pub invstd: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance (training mode) or the running variance used (eval mode).
    pub var: Vec<T>,
    pub train: bool,
}

/// Per-channel normalization over (N, H, W). `running` supplies eval-mode statistics.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<(&[T], &[T])>,
    eps: T,
) -> (Tensor<T>, BatchNormSaved<T>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let count = T::from_usize_lossy(n * plane);
    let xd = x.data();
    let (mean, var, train) = match running {
        Some((m, v)) => (m.to_vec(), v.to_vec(), false),
        None => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for item in 0..n {
                    let base = (item * c + ch) * plane;
                    s += xd[base..base + plane].iter().copied().sum::<T>();
                }
                let m = s / count;
                let mut v = T::zero();
                for item in 0..n {
                    let base = (item * c + ch) * plane;
                    for &val in &xd[base..base + plane] {
                        v += (val - m) * (val - m);
                    }
                }
                mean[ch] = m;
                var[ch] = v / count;
            }
            (mean, var, true)
        }
    };
    let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = Tensor::zeros(x.shape());
    let mut xhat = vec![T::zero(); x.numel()];
    let od = out.data_mut();
    for item in 0..n {
        for ch in 0..c {
            let base = (item * c + ch) * plane;
            for i in base..base + plane {
                let xh = (xd[i] - mean[ch]) * invstd[ch];
                xhat[i] = xh;
                od[i] = gamma.data()[ch] * xh + beta.data()[ch];
            }
        }
    }
    (out, BatchNormSaved { xhat, invstd, mean, var, train })
}

pub fn batchnorm_backward<T: Scalar>(
    gy: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BatchNormSaved<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = gy.dims4();
    let plane = h * w;
    let count = T::from_usize_lossy(n * plane);
    let gd = gy.data();
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dx = Tensor::zeros(gy.shape());
    for ch in 0..c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for item in 0..n {
            let base = (item * c + ch) * plane;
            for i in base..base + plane {
                sum_g += gd[i];
                sum_gx += gd[i] * saved.xhat[i];
            }
        }
        dgamma.data_mut()[ch] = sum_gx;
        dbeta.data_mut()[ch] = sum_g;
        let g = gamma.data()[ch];
        let inv = saved.invstd[ch];
        let dd = dx.data_mut();
        for item in 0..n {
            let base = (item * c + ch) * plane;
            for i in base..base + plane {
                dd[i] = if saved.train {
                    g * inv * (gd[i] - sum_g / count - saved.xhat[i] * sum_gx / count)
                } else {
                    g * inv * gd[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Softmax along the middle axis of an `(outer, dim, inner)` view.
pub fn softmax_forward<T: Scalar>(x: &Tensor<T>, outer: usize, dim: usize, inner: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * dim + k) * inner + i;
            let mut m = T::neg_infinity();
            for k in 0..dim {
                m = m.max(xd[at(k)]);
            }
            let mut s = T::zero();
            for k in 0..dim {
                let e = (xd[at(k)] - m).exp();
                od[at(k)] = e;
                s += e;
            }
            for k in 0..dim {
                od[at(k)] /= s;
            }
        }
    }
    out
}

pub fn softmax_backward<T: Scalar>(
    y: &Tensor<T>,
    gy: &Tensor<T>,
    outer: usize,
    dim: usize,
    inner: usize,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(y.shape());
    let yd = y.data();
    let gd = gy.data();
    let dd = dx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * dim + k) * inner + i;
            let mut dot = T::zero();
            for k in 0..dim {
                dot += yd[at(k)] * gd[at(k)];
            }
            for k in 0..dim {
                dd[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
            }
        }
    }
    dx
}

/// Batch, rows and columns of a rank-2 or rank-3 matrix operand.
pub fn mat_dims(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [r, c] => (1, r, c),
        [b, r, c] => (b, r, c),
        _ => panic!("matrix operand must be rank 2 or 3, got {shape:?}"),
    }
}

/// Shape of `op(a) @ op(b)` with batch broadcasting of size-1 batches.
pub fn bmm_shape(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<Vec<usize>, String> {
    let (ba, ra, ca) = mat_dims(a);
    let (bb, rb, cb) = mat_dims(b);
    let (m, ka) = if ta { (ca, ra) } else { (ra, ca) };
    let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
    if ka != kb {
        return Err(format!("matmul inner dims differ: {a:?} x {b:?} (ta={ta}, tb={tb})"));
    }
    if ba != bb && ba != 1 && bb != 1 {
        return Err(format!("matmul batch dims differ: {a:?} x {b:?}"));
    }
    if a.len() == 2 && b.len() == 2 {
        Ok(vec![m, n])
    } else {
        Ok(vec![ba.max(bb), m, n])
    }
}

pub fn bmm_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Tensor<T> {
    let shape = bmm_shape(a.shape(), b.shape(), ta, tb).expect("validated by caller");
    let (ba, ra, ca) = mat_dims(a.shape());
    let (bb, rb, cb) = mat_dims(b.shape());
    let batch = ba.max(bb);
    let m = shape[shape.len() - 2];
    let n = shape[shape.len() - 1];
    let mut out = Tensor::zeros(&shape);
    for i in 0..batch {
        let ai = if ba == 1 { 0 } else { i };
        let bi = if bb == 1 { 0 } else { i };
        let mut am = MatRef::new(&a.data()[ai * ra * ca..(ai + 1) * ra * ca], ra, ca);
        let mut bm = MatRef::new(&b.data()[bi * rb * cb..(bi + 1) * rb * cb], rb, cb);
        am.trans = ta;
        bm.trans = tb;
        gemm(T::one(), am, bm, T::zero(), &mut out.data_mut()[i * m * n..(i + 1) * m * n]);
    }
    out
}

pub fn bmm_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    gy: &Tensor<T>,
    ta: bool,
    tb: bool,
    need: (bool, bool),
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (ba, ra, ca) = mat_dims(a.shape());
    let (bb, rb, cb) = mat_dims(b.shape());
    let (_, m, n) = mat_dims(gy.shape());
    let batch = ba.max(bb);
    let mut da = need.0.then(|| Tensor::zeros(a.shape()));
    let mut db = need.1.then(|| Tensor::zeros(b.shape()));
    for i in 0..batch {
        let ai = if ba == 1 { 0 } else { i };
        let bi = if bb == 1 { 0 } else { i };
        let g = MatRef::new(&gy.data()[i * m * n..(i + 1) * m * n], m, n);
        let mut am = MatRef::new(&a.data()[ai * ra * ca..(ai + 1) * ra * ca], ra, ca);
        let mut bm = MatRef::new(&b.data()[bi * rb * cb..(bi + 1) * rb * cb], rb, cb);
        am.trans = ta;
        bm.trans = tb;
        if let Some(da) = da.as_mut() {
            let dst = &mut da.data_mut()[ai * ra * ca..(ai + 1) * ra * ca];
            if ta {
                gemm(T::one(), bm, g.t(), T::one(), dst);
            } else {
                gemm(T::one(), g, bm.t(), T::one(), dst);
            }
        }
        if let Some(db) = db.as_mut() {
            let dst = &mut db.data_mut()[bi * rb * cb..(bi + 1) * rb * cb];
            if tb {
                gemm(T::one(), g.t(), am, T::one(), dst);
            } else {
                gemm(T::one(), am.t(), g, T::one(), dst);
            }
        }
    }
    (da, db)
}

/// Strides of `s` broadcast against a rank-4 tensor of shape `full` (size-1 dims get stride 0).
pub fn broadcast_strides(s: &[usize], full: &[usize]) -> Result<[usize; 4], String> {
    if s.len() != 4 || full.len() != 4 {
        return Err(format!("broadcast needs rank-4 operands, got {s:?} and {full:?}"));
    }
    let mut strides = [0usize; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        if s[d] == full[d] {
            strides[d] = acc;
        } else if s[d] != 1 {
            return Err(format!("cannot broadcast {s:?} to {full:?}"));
        }
        acc *= s[d];
    }
    Ok(strides)
}

/// `x * s` with `s` broadcast over its size-1 axes.
pub fn mul_bcast_forward<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>, strides: [usize; 4]) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let sd = s.data();
    let od = out.data_mut();
    let mut i = 0;
    for a in 0..n {
        for b in 0..c {
            for y in 0..h {
                let so = a * strides[0] + b * strides[1] + y * strides[2];
                for z in 0..w {
                    od[i] = xd[i] * sd[so + z * strides[3]];
                    i += 1;
                }
            }
        }
    }
    out
}

pub fn mul_bcast_backward<T: Scalar>(
    x: &Tensor<T>,
    s: &Tensor<T>,
    gy: &Tensor<T>,
    strides: [usize; 4],
    need: (bool, bool),
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, h, w) = x.dims4();
    let mut dx = need.0.then(|| Tensor::zeros(x.shape()));
    let mut ds = need.1.then(|| Tensor::zeros(s.shape()));
    let xd = x.data();
    let sd = s.data();
    let gd = gy.data();
    let mut i = 0;
    for a in 0..n {
        for b in 0..c {
            for y in 0..h {
                let so = a * strides[0] + b * strides[1] + y * strides[2];
                for z in 0..w {
                    let sidx = so + z * strides[3];
                    if let Some(dx) = dx.as_mut() {
                        dx.data_mut()[i] = gd[i] * sd[sidx];
                    }
                    if let Some(ds) = ds.as_mut() {
                        ds.data_mut()[sidx] += gd[i] * xd[i];
                    }
                    i += 1;
                }
            }
        }
    }
    (dx, ds)
}

/// The eight unit offsets of the 3x3 neighbourhood, row-major, centre excluded.
pub const NEIGHBOUR_OFFSETS: [(isize, isize); 8] =
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Sum of squared dilated-contrast responses of a residual map `r` (N x C x H x W).
///
/// Each response is `r(p) - r(p + dilation * offset)` with zeros outside the map; only
/// pixels at least `border` away from every edge contribute. Returns the energy and the
/// number of contributing pixels.
pub fn dcd_energy<T: Scalar>(r: &Tensor<T>, dilation: usize, border: usize) -> (T, usize) {
    let (n, c, h, w) = r.dims4();
    let d = dilation as isize;
    let rd = r.data();
    let mut e = T::zero();
    let (y0, y1) = (border.min(h), h.saturating_sub(border));
    let (x0, x1) = (border.min(w), w.saturating_sub(border));
    for plane in 0..n * c {
        let m = &rd[plane * h * w..(plane + 1) * h * w];
        let at = |y: isize, x: isize| {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                T::zero()
            } else {
                m[y as usize * w + x as usize]
            }
        };
        for y in y0..y1 {
            for x in x0..x1 {
                let centre = m[y * w + x];
                for (oy, ox) in NEIGHBOUR_OFFSETS {
                    let resp = centre - at(y as isize + oy * d, x as isize + ox * d);
                    e += resp * resp;
                }
            }
        }
    }
    let pixels = n * c * y1.saturating_sub(y0) * x1.saturating_sub(x0);
    (e, pixels)
}

/// Gradient of [`dcd_energy`] with respect to `r`, scaled by `scale`.
pub fn dcd_energy_grad<T: Scalar>(r: &Tensor<T>, dilation: usize, border: usize, scale: T) -> Tensor<T> {
    let (n, c, h, w) = r.dims4();
    let d = dilation as isize;
    let rd = r.data();
    let mut g = Tensor::zeros(r.shape());
    let two = T::of(2.0) * scale;
    let (y0, y1) = (border.min(h), h.saturating_sub(border));
    let (x0, x1) = (border.min(w), w.saturating_sub(border));
    for plane in 0..n * c {
        let m = &rd[plane * h * w..(plane + 1) * h * w];
        let gm = &mut g.data_mut()[plane * h * w..(plane + 1) * h * w];
        for y in y0..y1 {
            for x in x0..x1 {
                let centre = m[y * w + x];
                for (oy, ox) in NEIGHBOUR_OFFSETS {
                    let ny = y as isize + oy * d;
                    let nx = x as isize + ox * d;
                    let inside = ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize;
                    let nb = if inside { m[ny as usize * w + nx as usize] } else { T::zero() };
                    let resp = two * (centre - nb);
                    gm[y * w + x] += resp;
                    if inside {
                        gm[ny as usize * w + nx as usize] -= resp;
                    }
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    /// Direct nested-loop convolution used as the reference.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, g: ConvGeom) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4();
        let (oc, _, kh, kw) = w.dims4();
        let (ho, wo) = (g.out_size(h, kh), g.out_size(wd, kw));
        let mut out = Tensor::zeros(&[n, oc, ho, wo]);
        for a in 0..n {
            for o in 0..oc {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut s = b.map_or(0.0, |b| b.data()[o]);
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (y + i * g.dilation) as isize - g.pad as isize;
                                    let ix = (xx + j * g.dilation) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.get(&[a, ci, iy as usize, ix as usize]) * w.get(&[o, ci, i, j]);
                                    }
                                }
                            }
                        }
                        out.set(&[a, o, y, xx], s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_for_padded_dilated_and_pointwise() {
        for (k, geom) in [
            (3, ConvGeom { pad: 1, dilation: 1 }),
            (3, ConvGeom { pad: 2, dilation: 2 }),
            (3, ConvGeom { pad: 0, dilation: 1 }),
            (1, ConvGeom { pad: 0, dilation: 1 }),
        ] {
            let x = rand_t(&[2, 3, 7, 6], 1);
            let w = rand_t(&[4, 3, k, k], 2);
            let b = rand_t(&[4], 3);
            let fast = conv2d_forward(&x, &w, Some(&b), geom);
            let slow = conv_naive(&x, &w, Some(&b), geom);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "{geom:?}");
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), gy> is bilinear, so <dx, x> + <dw, w> = 2 <gy, conv(x)> without bias.
        let geom = ConvGeom { pad: 1, dilation: 1 };
        let x = rand_t(&[2, 3, 5, 5], 4);
        let w = rand_t(&[2, 3, 3, 3], 5);
        let y = conv2d_forward(&x, &w, None, geom);
        let gy = rand_t(y.shape(), 6);
        let gr = conv2d_backward(&x, &w, &gy, geom, (true, true, true));
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(&gr.dx.unwrap(), &x);
        let rhs = dot(&gy, &y);
        assert!((lhs - rhs).abs() < 1e-9);
        let lhs_w = dot(&gr.dw.unwrap(), &w);
        assert!((lhs_w - rhs).abs() < 1e-9);
    }

    #[test]
    fn upsample_is_identity_at_scale_one_and_preserves_constants() {
        let x = rand_t(&[1, 2, 4, 4], 7);
        assert!(upsample_forward(&x, 4, 4).max_abs_diff(&x) < 1e-15);
        let c = Tensor::<f64>::full(&[1, 1, 3, 3], 2.5);
        let up = upsample_forward(&c, 12, 12);
        assert!(up.data().iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = rand_t(&[1, 2, 3, 5], 8);
        let y = upsample_forward(&x, 6, 10);
        let gy = rand_t(y.shape(), 9);
        let dx = upsample_backward(x.shape(), &gy);
        let a: f64 = dx.data().iter().zip(x.data()).map(|(p, q)| p * q).sum();
        let b: f64 = gy.data().iter().zip(y.data()).map(|(p, q)| p * q).sum();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64, 4.0, 3.0, 2.0]).unwrap();
        let (y, arg) = maxpool2_forward(&x);
        assert_eq!(y.data(), &[4.0]);
        let dx = maxpool2_backward(x.shape(), &Tensor::full(&[1, 1, 1, 1], 1.0), &arg);
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn bmm_broadcasts_shared_operand() {
        let a = rand_t(&[3, 4], 10);
        let b = rand_t(&[2, 4, 5], 11);
        let y = bmm_forward(&a, &b, false, false);
        assert_eq!(y.shape(), &[2, 3, 5]);
        for i in 0..2 {
            for r in 0..3 {
                for c in 0..5 {
                    let s: f64 = (0..4).map(|k| a.get(&[r, k]) * b.get(&[i, k, c])).sum();
                    assert!((y.get(&[i, r, c]) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dcd_energy_vanishes_for_constants_in_interior() {
        let r = Tensor::<f64>::full(&[1, 1, 9, 9], 3.0);
        let (e, px) = dcd_energy(&r, 2, 2);
        assert_eq!(e, 0.0);
        assert_eq!(px, 25);
        let (e_full, _) = dcd_energy(&r, 2, 0);
        assert!(e_full > 0.0);
    }
}

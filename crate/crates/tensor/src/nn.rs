//! Network layers with hand-written adjoints.

use crate::error::{Result, TensorError};
use crate::graph::{add_into, Grads, Graph, Op, Var};
use crate::real::{gemm, Layout, Real};
use crate::tensor::Tensor;

/// Additive mask value for disallowed attention pairs. Finite so that
/// gradients through the softmax stay finite.
pub const BLOCKED: f64 = -1e9;

fn is_open<T: Real>(m: T) -> bool {
    m > T::lit(BLOCKED * 0.5)
}

/// Softmax along the last axis of `logits + mask`. `mask` may be smaller
/// than `logits`, in which case it is tiled.
pub(crate) fn softmax_rows<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|x| *x *= inv);
}

/// `ga += scale * y * (g - sum(g * y))` per row of length `n`.
pub(crate) fn softmax_backward<T: Real>(y: &[T], g: &[T], ga: &mut [T], n: usize, scale: T) {
    for ((yr, gr), ar) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(ga.chunks_exact_mut(n)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((acc, &yv), &gv) in ar.iter_mut().zip(yr).zip(gr) {
            *acc += scale * yv * (gv - dot);
        }
    }
}

/// Shape of a batched attention call: `groups` independent sequences, each
/// with `q_len` queries over `kv_len` keys, split across `heads`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub groups: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
}

impl AttentionShape {
    pub fn self_attention(groups: usize, len: usize, heads: usize) -> Self {
        AttentionShape { groups, q_len: len, kv_len: len, heads }
    }
}

/// Additive attention mask: `q_len x kv_len` per group, or one shared by all groups.
#[derive(Clone, Copy, Debug)]
pub enum AttnMask<'a, T> {
    None,
    Shared(&'a [T]),
    PerGroup(&'a [T]),
}

pub(crate) struct AttentionCache<T> {
    q: Var,
    k: Var,
    v: Var,
    shape: AttentionShape,
    dim: usize,
    probs: Vec<T>,
}

pub(crate) struct ConvCache<T> {
    x: Var,
    w: Var,
    b: Option<Var>,
    batch: usize,
    cin: usize,
    cout: usize,
    /// Extents of the larger (conv input / transposed-conv output) grid.
    big: (usize, usize),
    /// Extents of the smaller (conv output / transposed-conv input) grid.
    small: (usize, usize),
    k: usize,
    stride: usize,
    /// im2col columns of the input, kept for the weight gradient (conv only).
    cols: Vec<T>,
}

pub(crate) struct BatchNormCache<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
    batch: usize,
    channels: usize,
    spatial: usize,
}

/// Statistics of one training-mode batch-norm call, for running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    Train,
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Convolution geometry with "same" padding: kernel `k` (odd), pad `k / 2`.
#[derive(Clone, Copy)]
struct Geom {
    c: usize,
    big: (usize, usize),
    small: (usize, usize),
    k: usize,
    stride: usize,
}

impl Geom {
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.small.0 * self.small.1
    }
}

/// Gathers `[C, H, W]` into `[C*k*k, Ho*Wo]` patches.
fn im2col<T: Real>(src: &[T], g: Geom, dst: &mut [T]) {
    let (hb, wb) = g.big;
    let (hs, ws) = g.small;
    let p = g.pad();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &src[c * hb * wb..(c + 1) * hb * wb];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let out = &mut dst[row * hs * ws..(row + 1) * hs * ws];
                for oy in 0..hs {
                    let iy = (oy * g.stride) as isize + ky as isize - p;
                    let line = &mut out[oy * ws..(oy + 1) * ws];
                    if iy < 0 || iy >= hb as isize {
                        line.iter_mut().for_each(|x| *x = T::zero());
                        continue;
                    }
                    let src_line = &plane[iy as usize * wb..(iy as usize + 1) * wb];
                    for (ox, o) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize + kx as isize - p;
                        *o = if ix < 0 || ix >= wb as isize { T::zero() } else { src_line[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `[C, H, W]`.
fn col2im<T: Real>(src: &[T], g: Geom, dst: &mut [T]) {
    let (hb, wb) = g.big;
    let (hs, ws) = g.small;
    let p = g.pad();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &mut dst[c * hb * wb..(c + 1) * hb * wb];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let cols = &src[row * hs * ws..(row + 1) * hs * ws];
                for oy in 0..hs {
                    let iy = (oy * g.stride) as isize + ky as isize - p;
                    if iy < 0 || iy >= hb as isize {
                        continue;
                    }
                    let dst_line = &mut plane[iy as usize * wb..(iy as usize + 1) * wb];
                    for (ox, &v) in cols[oy * ws..(oy + 1) * ws].iter().enumerate() {
                        let ix = (ox * g.stride) as isize + kx as isize - p;
                        if ix >= 0 && ix < wb as isize {
                            dst_line[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], spatial: usize) {
    for (plane, &b) in out.chunks_exact_mut(spatial).zip(bias.iter().cycle()) {
        plane.iter_mut().for_each(|x| *x += b);
    }
}

fn channel_sums<T: Real>(g: &[T], gb: &mut [T], spatial: usize) {
    let c = gb.len();
    for (i, plane) in g.chunks_exact(spatial).enumerate() {
        gb[i % c] += plane.iter().copied().sum::<T>();
    }
}

impl<T: Real> Graph<T> {
    /// Softmax over the last axis of `logits + mask`. Every row must contain at
    /// least one unblocked entry. Blocked entries come out as exact zeros.
    pub fn masked_softmax(&mut self, logits: Var, mask: &Tensor<T>) -> Result<Var> {
        let lv = self.value(logits);
        let n = lv.last_dim();
        if mask.last_dim() != n || lv.len() % mask.len() != 0 {
            return Err(TensorError::Shape { op: "masked_softmax", lhs: lv.shape().to_vec(), rhs: mask.shape().to_vec() });
        }
        if let Some(r) = mask.data().chunks_exact(n).position(|row| !row.iter().any(|&m| is_open(m))) {
            return Err(TensorError::Precondition { op: "masked_softmax", msg: format!("mask row {r} is fully blocked") });
        }
        let mut data = lv.data().to_vec();
        for (tile, _) in data.chunks_exact_mut(mask.len()).zip(0..) {
            add_into(tile, mask.data());
        }
        data.chunks_exact_mut(n).for_each(softmax_rows);
        let value = Tensor::new(lv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MaskedSoftmax { a: logits }, &[logits]))
    }

    /// Standardizes the last axis then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != d || bv.len() != d {
            return Err(TensorError::Shape { op: "layer_norm", lhs: xv.shape().to_vec(), rhs: gv.shape().to_vec() });
        }
        let dn = T::from_usize(d).unwrap();
        let rows = xv.len() / d;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for ((&v, &ga), &be) in row.iter().zip(gv.data()).zip(bv.data()) {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * ga + be);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Multi-head scaled dot-product attention, `softmax((QK^T + M) / sqrt(d_h)) V`
    /// per head, heads written back side by side. `q` holds `groups * q_len`
    /// rows and `k`, `v` hold `groups * kv_len` rows, all of width `D`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape, mask: AttnMask<'_, T>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.last_dim();
        let AttentionShape { groups, q_len: sq, kv_len: skv, heads } = shape;
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Dimension { op: "attention", msg: format!("width {d} not divisible by {heads} heads") });
        }
        if qv.len() != groups * sq * d {
            return Err(TensorError::Dimension {
                op: "attention",
                msg: format!("query shape {:?} does not hold {groups}x{sq} rows of width {d}", qv.shape()),
            });
        }
        if kv.shape() != vv.shape() || kv.len() != groups * skv * d || kv.last_dim() != d {
            return Err(TensorError::Shape { op: "attention", lhs: kv.shape().to_vec(), rhs: vv.shape().to_vec() });
        }
        let mask_len = match mask {
            AttnMask::None => 0,
            AttnMask::Shared(m) => {
                if m.len() != sq * skv {
                    return Err(TensorError::Dimension { op: "attention", msg: format!("shared mask has {} entries, want {}", m.len(), sq * skv) });
                }
                m.len()
            }
            AttnMask::PerGroup(m) => {
                if m.len() != groups * sq * skv {
                    return Err(TensorError::Dimension {
                        op: "attention",
                        msg: format!("per-group mask has {} entries, want {}", m.len(), groups * sq * skv),
                    });
                }
                m.len()
            }
        };
        let _ = mask_len;
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let block = sq * skv;
        let mut probs = vec![T::zero(); groups * heads * block];
        let mut out = vec![T::zero(); groups * sq * d];
        for g in 0..groups {
            let m = match mask {
                AttnMask::None => None,
                AttnMask::Shared(m) => Some(m),
                AttnMask::PerGroup(m) => Some(&m[g * block..(g + 1) * block]),
            };
            if let Some(m) = m {
                if let Some(r) = m.chunks_exact(skv).position(|row| !row.iter().any(|&x| is_open(x))) {
                    return Err(TensorError::Precondition {
                        op: "attention",
                        msg: format!("group {g}: mask row {r} is fully blocked"),
                    });
                }
            }
            for h in 0..heads {
                let ql = Layout { offset: g * sq * d + h * dh, rs: d, cs: 1 };
                let kt = Layout { offset: g * skv * d + h * dh, rs: 1, cs: d };
                let vl = Layout { offset: g * skv * d + h * dh, rs: d, cs: 1 };
                let p_off = (g * heads + h) * block;
                let p = &mut probs[p_off..p_off + block];
                gemm(sq, dh, skv, T::one(), qv.data(), ql, kv.data(), kt, T::zero(), p, Layout::row_major(0, skv));
                if let Some(m) = m {
                    add_into(p, m);
                }
                p.iter_mut().for_each(|x| *x *= scale);
                p.chunks_exact_mut(skv).for_each(softmax_rows);
                gemm(sq, skv, dh, T::one(), &probs, Layout::row_major(p_off, skv), vv.data(), vl, T::zero(), &mut out, ql);
            }
        }
        let value = Tensor::new(qv.shape().to_vec(), out)?;
        let cache = AttentionCache { q, k, v, shape, dim: d, probs };
        Ok(self.push(value, Op::Attention(Box::new(cache)), &[q, k, v]))
    }

    /// 2-D cross-correlation with "same" padding. `x: [B, Cin, H, W]`,
    /// `w: [Cout, Cin, k, k]`, output `[B, Cout, H / stride, W / stride]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (batch, cin, h, wd) = dims4("conv2d", xv)?;
        let (cout, wcin, k) = conv_weight_dims("conv2d", wv, xv)?;
        if wcin != cin {
            return Err(TensorError::Shape { op: "conv2d", lhs: xv.shape().to_vec(), rhs: wv.shape().to_vec() });
        }
        if stride == 0 || h % stride != 0 || wd % stride != 0 {
            return Err(TensorError::Dimension {
                op: "conv2d",
                msg: format!("spatial extent {h}x{wd} is not divisible by stride {stride}"),
            });
        }
        check_bias(self, b, cout, "conv2d")?;
        let geom = Geom { c: cin, big: (h, wd), small: (h / stride, wd / stride), k, stride };
        let (ckk, hw) = (geom.rows(), geom.cols());
        let mut cols = vec![T::zero(); batch * ckk * hw];
        let mut out = vec![T::zero(); batch * cout * hw];
        for bi in 0..batch {
            let xs = &xv.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let cb = &mut cols[bi * ckk * hw..(bi + 1) * ckk * hw];
            im2col(xs, geom, cb);
            gemm(cout, ckk, hw, T::one(), wv.data(), Layout::row_major(0, ckk), &cols, Layout::row_major(bi * ckk * hw, hw), T::zero(), &mut out, Layout::row_major(bi * cout * hw, hw));
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), hw);
        }
        let value = Tensor::new(vec![batch, cout, geom.small.0, geom.small.1], out)?;
        let cache = ConvCache { x, w, b, batch, cin, cout, big: geom.big, small: geom.small, k, stride, cols };
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Conv2d(Box::new(cache)), &parents))
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`] with the same
    /// kernel, stride and padding. `x: [B, Cin, H, W]`, `w: [Cin, Cout, k, k]`,
    /// output `[B, Cout, H * stride, W * stride]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (batch, cin, h, wd) = dims4("conv_transpose2d", xv)?;
        let (wcin, cout, k) = conv_weight_dims("conv_transpose2d", wv, xv)?;
        if wcin != cin {
            return Err(TensorError::Shape { op: "conv_transpose2d", lhs: xv.shape().to_vec(), rhs: wv.shape().to_vec() });
        }
        if !(stride == 1 || stride == 2) {
            return Err(TensorError::Dimension { op: "conv_transpose2d", msg: format!("stride {stride} not in {{1, 2}}") });
        }
        check_bias(self, b, cout, "conv_transpose2d")?;
        let geom = Geom { c: cout, big: (h * stride, wd * stride), small: (h, wd), k, stride };
        let (ckk, hw) = (geom.rows(), geom.cols());
        let big = geom.big.0 * geom.big.1;
        let mut cols = vec![T::zero(); ckk * hw];
        let mut out = vec![T::zero(); batch * cout * big];
        for bi in 0..batch {
            gemm(ckk, cin, hw, T::one(), wv.data(), Layout::transposed(0, ckk), xv.data(), Layout::row_major(bi * cin * hw, hw), T::zero(), &mut cols, Layout::row_major(0, hw));
            col2im(&cols, geom, &mut out[bi * cout * big..(bi + 1) * cout * big]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), big);
        }
        let value = Tensor::new(vec![batch, cout, geom.big.0, geom.big.1], out)?;
        let cache = ConvCache { x, w, b, batch, cin, cout, big: geom.big, small: geom.small, k, stride, cols: Vec::new() };
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::ConvTranspose2d(Box::new(cache)), &parents))
    }

    /// Per-channel normalization over batch and spatial axes of `[B, C, ...]`.
    /// Training mode also returns the batch statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T, mode: BnMode<'_, T>) -> Result<(Var, Option<BatchStats<T>>)> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(TensorError::Dimension { op: "batch_norm", msg: format!("need [B, C, ..], got {:?}", xv.shape()) });
        }
        let (batch, channels) = (xv.shape()[0], xv.shape()[1]);
        let spatial = xv.len() / (batch * channels);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != channels || bv.len() != channels {
            return Err(TensorError::Shape { op: "batch_norm", lhs: xv.shape().to_vec(), rhs: gv.shape().to_vec() });
        }
        let count = batch * spatial;
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let n = T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); channels];
                for (i, plane) in xv.data().chunks_exact(spatial).enumerate() {
                    mean[i % channels] += plane.iter().copied().sum::<T>();
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![T::zero(); channels];
                for (i, plane) in xv.data().chunks_exact(spatial).enumerate() {
                    let m = mean[i % channels];
                    var[i % channels] += plane.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                }
                let unbiased: Vec<T> = var.iter().map(|&v| if count > 1 { v / T::from_usize(count - 1).unwrap() } else { v }).collect();
                var.iter_mut().for_each(|v| *v /= n);
                (mean.clone(), var, Some(BatchStats { mean, var: unbiased }))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(TensorError::Dimension { op: "batch_norm", msg: "running statistics do not match channels".into() });
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for (i, plane) in xv.data().chunks_exact(spatial).enumerate() {
            let c = i % channels;
            let (m, s, ga, be) = (mean[c], inv_std[c], gv.data()[c], bv.data()[c]);
            for &v in plane {
                let h = (v - m) * s;
                xhat.push(h);
                out.push(h * ga + be);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let train = matches!(mode, BnMode::Train);
        let cache = BatchNormCache { x, gamma, beta, xhat, inv_std, train, batch, channels, spatial };
        Ok((self.push(value, Op::BatchNorm(Box::new(cache)), &[x, gamma, beta]), stats))
    }
}

fn dims4<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(TensorError::Dimension { op, msg: format!("expected [B, C, H, W], got {:?}", t.shape()) }),
    }
}

fn conv_weight_dims<T: Real>(op: &'static str, w: &Tensor<T>, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *w.shape() {
        [a, b, k, k2] if k == k2 && k % 2 == 1 => Ok((a, b, k)),
        _ => Err(TensorError::Shape { op, lhs: x.shape().to_vec(), rhs: w.shape().to_vec() }),
    }
}

fn check_bias<T: Real>(g: &Graph<T>, b: Option<Var>, cout: usize, op: &'static str) -> Result<()> {
    if let Some(b) = b {
        if g.value(b).len() != cout {
            return Err(TensorError::Dimension { op, msg: format!("bias has {} entries for {cout} channels", g.value(b).len()) });
        }
    }
    Ok(())
}

pub(crate) fn layer_norm_backward<T: Real>(grads: &mut Grads<'_, T>, g: &[T], x: Var, gain: Var, bias: Var, xhat: &[T], rstd: &[T]) {
    let gv = grads.value(gain);
    let d = gv.len();
    let dn = T::from_usize(d).unwrap();
    if let Some(gg) = grads.slot(gain) {
        for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
            for ((acc, &a), &h) in gg.iter_mut().zip(gr).zip(hr) {
                *acc += a * h;
            }
        }
    }
    if let Some(gb) = grads.slot(bias) {
        for gr in g.chunks_exact(d) {
            add_into(gb, gr);
        }
    }
    if let Some(gx) = grads.slot(x) {
        let mut dxhat = vec![T::zero(); d];
        for (((gr, hr), xr), &r) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).zip(gx.chunks_exact_mut(d)).zip(rstd) {
            for ((dh, &a), &ga) in dxhat.iter_mut().zip(gr).zip(gv.data()) {
                *dh = a * ga;
            }
            let m1 = dxhat.iter().copied().sum::<T>() / dn;
            let m2 = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / dn;
            for ((acc, &dh), &h) in xr.iter_mut().zip(&dxhat).zip(hr) {
                *acc += r * (dh - m1 - h * m2);
            }
        }
    }
}

pub(crate) fn attention_backward<T: Real>(grads: &mut Grads<'_, T>, g: &[T], c: &AttentionCache<T>) {
    let AttentionShape { groups, q_len: sq, kv_len: skv, heads } = c.shape;
    let d = c.dim;
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let block = sq * skv;
    let (qv, kv, vv) = (grads.value(c.q), grads.value(c.k), grads.value(c.v));
    let q_layout = |g: usize, h: usize| Layout { offset: g * sq * d + h * dh, rs: d, cs: 1 };
    let kv_layout = |g: usize, h: usize| Layout { offset: g * skv * d + h * dh, rs: d, cs: 1 };

    if let Some(gv) = grads.slot(c.v) {
        for gi in 0..groups {
            for h in 0..heads {
                let p_off = (gi * heads + h) * block;
                gemm(skv, sq, dh, T::one(), &c.probs, Layout::transposed(p_off, skv), g, q_layout(gi, h), T::one(), gv, kv_layout(gi, h));
            }
        }
    }
    let needs_scores = grads.slot(c.q).is_some() || grads.slot(c.k).is_some();
    if !needs_scores {
        return;
    }
    // dS = P * (dP - rowsum(dP * P)) / sqrt(d_h), with dP = dO V^T
    let mut ds = vec![T::zero(); groups * heads * block];
    for gi in 0..groups {
        for h in 0..heads {
            let p_off = (gi * heads + h) * block;
            let mut dp = vec![T::zero(); block];
            gemm(sq, dh, skv, T::one(), g, q_layout(gi, h), vv.data(), kv_layout(gi, h).t(), T::zero(), &mut dp, Layout::row_major(0, skv));
            softmax_backward(&c.probs[p_off..p_off + block], &dp, &mut ds[p_off..p_off + block], skv, scale);
        }
    }
    if let Some(gq) = grads.slot(c.q) {
        for gi in 0..groups {
            for h in 0..heads {
                let p_off = (gi * heads + h) * block;
                gemm(sq, skv, dh, T::one(), &ds, Layout::row_major(p_off, skv), kv.data(), kv_layout(gi, h), T::one(), gq, q_layout(gi, h));
            }
        }
    }
    if let Some(gk) = grads.slot(c.k) {
        for gi in 0..groups {
            for h in 0..heads {
                let p_off = (gi * heads + h) * block;
                gemm(skv, sq, dh, T::one(), &ds, Layout::transposed(p_off, skv), qv.data(), q_layout(gi, h), T::one(), gk, kv_layout(gi, h));
            }
        }
    }
}

pub(crate) fn conv2d_backward<T: Real>(grads: &mut Grads<'_, T>, g: &[T], c: &ConvCache<T>) {
    let geom = Geom { c: c.cin, big: c.big, small: c.small, k: c.k, stride: c.stride };
    let (ckk, hw) = (geom.rows(), geom.cols());
    let big = c.big.0 * c.big.1;
    let wv = grads.value(c.w);
    if let Some(gw) = grads.slot(c.w) {
        for bi in 0..c.batch {
            gemm(c.cout, hw, ckk, T::one(), g, Layout::row_major(bi * c.cout * hw, hw), &c.cols, Layout::transposed(bi * ckk * hw, hw), T::one(), gw, Layout::row_major(0, ckk));
        }
    }
    if let Some(b) = c.b {
        if let Some(gb) = grads.slot(b) {
            channel_sums(g, gb, hw);
        }
    }
    if let Some(gx) = grads.slot(c.x) {
        let mut dcols = vec![T::zero(); ckk * hw];
        for bi in 0..c.batch {
            gemm(ckk, c.cout, hw, T::one(), wv.data(), Layout::transposed(0, ckk), g, Layout::row_major(bi * c.cout * hw, hw), T::zero(), &mut dcols, Layout::row_major(0, hw));
            col2im(&dcols, geom, &mut gx[bi * c.cin * big..(bi + 1) * c.cin * big]);
        }
    }
}

pub(crate) fn conv_transpose2d_backward<T: Real>(grads: &mut Grads<'_, T>, g: &[T], c: &ConvCache<T>) {
    let geom = Geom { c: c.cout, big: c.big, small: c.small, k: c.k, stride: c.stride };
    let (ckk, hw) = (geom.rows(), geom.cols());
    let big = c.big.0 * c.big.1;
    let (xv, wv) = (grads.value(c.x), grads.value(c.w));
    let mut gcols = vec![T::zero(); c.batch * ckk * hw];
    for bi in 0..c.batch {
        im2col(&g[bi * c.cout * big..(bi + 1) * c.cout * big], geom, &mut gcols[bi * ckk * hw..(bi + 1) * ckk * hw]);
    }
    if let Some(gx) = grads.slot(c.x) {
        for bi in 0..c.batch {
            gemm(c.cin, ckk, hw, T::one(), wv.data(), Layout::row_major(0, ckk), &gcols, Layout::row_major(bi * ckk * hw, hw), T::one(), gx, Layout::row_major(bi * c.cin * hw, hw));
        }
    }
    if let Some(gw) = grads.slot(c.w) {
        for bi in 0..c.batch {
            gemm(c.cin, hw, ckk, T::one(), xv.data(), Layout::row_major(bi * c.cin * hw, hw), &gcols, Layout::transposed(bi * ckk * hw, hw), T::one(), gw, Layout::row_major(0, ckk));
        }
    }
    if let Some(b) = c.b {
        if let Some(gb) = grads.slot(b) {
            channel_sums(g, gb, big);
        }
    }
}

pub(crate) fn batch_norm_backward<T: Real>(grads: &mut Grads<'_, T>, g: &[T], c: &BatchNormCache<T>) {
    let ch = c.channels;
    let gamma = grads.value(c.gamma);
    let mut sum_g = vec![T::zero(); ch];
    let mut sum_gx = vec![T::zero(); ch];
    for (i, (gp, hp)) in g.chunks_exact(c.spatial).zip(c.xhat.chunks_exact(c.spatial)).enumerate() {
        sum_g[i % ch] += gp.iter().copied().sum::<T>();
        sum_gx[i % ch] += gp.iter().zip(hp).map(|(&a, &b)| a * b).sum::<T>();
    }
    if let Some(gg) = grads.slot(c.gamma) {
        add_into(gg, &sum_gx);
    }
    if let Some(gb) = grads.slot(c.beta) {
        add_into(gb, &sum_g);
    }
    if let Some(gx) = grads.slot(c.x) {
        let n = T::from_usize(c.batch * c.spatial).unwrap();
        for (i, ((gp, hp), xp)) in g.chunks_exact(c.spatial).zip(c.xhat.chunks_exact(c.spatial)).zip(gx.chunks_exact_mut(c.spatial)).enumerate() {
            let ci = i % ch;
            let k = gamma.data()[ci] * c.inv_std[ci];
            if c.train {
                let (mg, mgx) = (sum_g[ci] / n, sum_gx[ci] / n);
                for ((acc, &a), &h) in xp.iter_mut().zip(gp).zip(hp) {
                    *acc += k * (a - mg - h * mgx);
                }
            } else {
                for (acc, &a) in xp.iter_mut().zip(gp) {
                    *acc += k * a;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn masked_softmax_symmetric_case() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1., 1., 1.]));
        let y = g.masked_softmax(x, &t(&[3], &[0., BLOCKED, 0.])).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.5).abs() < 1e-12 && v[1] <= 1e-30 && (v[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_uniform_and_pair() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0., 0.]));
        let y = g.masked_softmax(x, &t(&[2], &[0., 0.])).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(t(&[3], &[2., 1., 0.]));
        let y = g.masked_softmax(x, &t(&[3], &[0., 0., BLOCKED])).unwrap();
        let e2 = 2f64.exp();
        let e1 = 1f64.exp();
        let v = g.value(y).data();
        assert!((v[0] - e2 / (e2 + e1)).abs() < 1e-12);
        assert!((v[1] - e1 / (e2 + e1)).abs() < 1e-12);
        assert!((v[0] - 0.7311).abs() < 1e-4 && v[2] == 0.0);
    }

    #[test]
    fn masked_softmax_rejects_fully_blocked_row() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0., 0., 0., 0.]));
        let err = g.masked_softmax(x, &t(&[2, 2], &[0., 0., BLOCKED, BLOCKED])).unwrap_err();
        assert!(matches!(err, TensorError::Precondition { .. }));
    }

    #[test]
    fn layer_norm_constant_and_standardized_rows() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[5., 5., 1., -1.]));
        let ga = g.constant(t(&[2], &[1., 1.]));
        let be = g.constant(t(&[2], &[0., 0.]));
        let y = g.layer_norm(x, ga, be, 1e-12).unwrap();
        let v = g.value(y).data();
        assert_eq!(&v[..2], &[0., 0.]);
        assert!((v[2] - 1.0).abs() < 1e-9 && (v[3] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn conv2d_halves_and_rejects_odd_extent() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(vec![1, 1, 4, 4], 1.0));
        let w = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        // stride-2 taps land on (0,0) corner, (0,2)/(2,0) edges and (2,2) interior
        assert_eq!(g.value(y).data(), &[4., 6., 6., 9.]);
        let odd = g.constant(Tensor::zeros(vec![1, 1, 5, 4]));
        assert!(matches!(g.conv2d(odd, w, None, 2), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn conv_transpose_doubles_and_broadcasts_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 3, 3]));
        let w = g.constant(Tensor::full(vec![2, 4, 3, 3], 0.3));
        let b = g.constant(t(&[4], &[1., 2., 3., 4.]));
        let y = g.conv_transpose2d(x, w, Some(b), 2).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 6, 6]);
        let v = g.value(y).data();
        for c in 0..4 {
            assert!(v[c * 36..(c + 1) * 36].iter().all(|&z| z == (c + 1) as f64));
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 1, 2], &[3., 5.]));
        let ga = g.constant(t(&[1], &[2.]));
        let be = g.constant(t(&[1], &[1.]));
        let (y, stats) = g.batch_norm(x, ga, be, 0.0, BnMode::Eval { mean: &[1.0], var: &[4.0] }).unwrap();
        assert!(stats.is_none());
        assert_eq!(g.value(y).data(), &[3., 5.]);
        let (_, stats) = g.batch_norm(x, ga, be, 1e-5, BnMode::Train).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![4.0]);
        assert_eq!(stats.var, vec![2.0]);
    }

    #[test]
    fn attention_rejects_bad_head_count() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros(vec![3, 6]));
        let r = g.attention(q, q, q, AttentionShape::self_attention(1, 3, 4), AttnMask::None);
        assert!(matches!(r, Err(TensorError::Dimension { .. })));
    }
}

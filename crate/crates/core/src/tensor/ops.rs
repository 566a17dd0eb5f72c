//! Forward operations and their vector-Jacobian products.
//!
//! Every op validates shapes, computes the output, checks it for
//! non-finite values, and records itself on the tape when any input
//! participates. Ops whose inputs are all plain tensors evaluate purely
//! without touching the tape.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::TensorError;

use super::tape::{accumulate, grad_slot, Tape};
use super::Tensor;

#[derive(Debug, Clone)]
pub(crate) struct ConvMeta {
    pub b: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct BnMeta {
    pub feat: usize,
    pub rows: usize,
    pub spatial: usize,
    /// 1/sqrt(var + eps) per feature, from batch stats (training) or
    /// running stats (inference).
    pub inv_std: Vec<f64>,
    pub train: bool,
}

#[derive(Debug, Clone)]
pub(crate) enum OpKind {
    Leaf,
    Const,
    Matmul,
    Add { bcast: bool },
    Sub,
    Mul,
    Scale(f64),
    Concat { axis: usize },
    Reshape,
    LeakyRelu(f64),
    Tanh,
    Softplus,
    AbsSum,
    SquareSum,
    Mean,
    Conv2d(ConvMeta),
    ConvT2d(ConvMeta),
    BatchNorm(BnMeta),
    KlUniform { bins: usize, tau: f64 },
}

/// Per-feature batch statistics returned by training-mode normalization,
/// for the caller's running-average update.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<(), TensorError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite(op))
    }
}

impl Tape {
    fn emit(
        &mut self,
        op: OpKind,
        op_name: &'static str,
        inputs: &[&Tensor],
        shape: Vec<usize>,
        value: Vec<f64>,
    ) -> Result<Tensor, TensorError> {
        check_finite(op_name, &value)?;
        let value = Arc::new(value);
        if self.participates(inputs)? {
            self.check_open()?;
            let mut ids = Vec::with_capacity(inputs.len());
            for t in inputs {
                ids.push(self.intern(t)?);
            }
            let needs = ids.iter().any(|&i| self.records[i as usize].needs_grad);
            let node = self.push(op, ids, shape.clone(), Arc::clone(&value), needs);
            Ok(Tensor::from_arc(shape, value, Some(node)))
        } else {
            Ok(Tensor::from_arc(shape, value, None))
        }
    }

    /// Matrix product. Supports [m,k]x[k,n], [k]x[k,n] and [m,k]x[k].
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k, n, shape) = matmul_dims(a.shape(), b.shape())?;
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, a.data(), b.data(), &mut out);
        self.emit(OpKind::Matmul, "matmul", &[a, b], shape, out)
    }

    /// Elementwise sum. `b` may be a vector broadcast over the rows of a
    /// rank-2 `a`.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape() == b.shape() {
            let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            self.emit(OpKind::Add { bcast: false }, "add", &[a, b], a.shape().to_vec(), out)
        } else if a.shape().len() == 2 && b.shape().len() == 1 && a.shape()[1] == b.shape()[0] {
            let cols = b.len();
            let mut out = a.data().to_vec();
            for row in out.chunks_mut(cols) {
                for (o, v) in row.iter_mut().zip(b.data()) {
                    *o += v;
                }
            }
            self.emit(OpKind::Add { bcast: true }, "add", &[a, b], a.shape().to_vec(), out)
        } else {
            Err(mismatch("add", format!("{:?} vs {:?}", a.shape(), b.shape())))
        }
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape() != b.shape() {
            return Err(mismatch("sub", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        self.emit(OpKind::Sub, "sub", &[a, b], a.shape().to_vec(), out)
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape() != b.shape() {
            return Err(mismatch("mul", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        self.emit(OpKind::Mul, "mul", &[a, b], a.shape().to_vec(), out)
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor, TensorError> {
        let out = a.data().iter().map(|x| x * c).collect();
        self.emit(OpKind::Scale(c), "scale", &[a], a.shape().to_vec(), out)
    }

    /// Concatenation of two tensors along `axis`; all other extents must
    /// agree.
    pub fn concat(&mut self, a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != sb.len() || axis >= sa.len() {
            return Err(mismatch("concat", format!("{:?} vs {:?} axis {}", sa, sb, axis)));
        }
        for (d, (x, y)) in sa.iter().zip(sb).enumerate() {
            if d != axis && x != y {
                return Err(mismatch("concat", format!("{:?} vs {:?} axis {}", sa, sb, axis)));
            }
        }
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (ba, bb) = (sa[axis] * inner, sb[axis] * inner);
        let mut out = Vec::with_capacity(a.len() + b.len());
        for o in 0..outer {
            out.extend_from_slice(&a.data()[o * ba..(o + 1) * ba]);
            out.extend_from_slice(&b.data()[o * bb..(o + 1) * bb]);
        }
        self.emit(OpKind::Concat { axis }, "concat", &[a, b], shape, out)
    }

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor, TensorError> {
        let n: usize = shape.iter().product();
        if n != a.len() || shape.iter().any(|&e| e == 0) {
            return Err(mismatch("reshape", format!("{:?} -> {:?}", a.shape(), shape)));
        }
        self.emit(OpKind::Reshape, "reshape", &[a], shape.to_vec(), a.data().to_vec())
    }

    /// Leaky rectifier; the derivative at exactly 0 is the slope.
    pub fn leaky_relu(&mut self, a: &Tensor, slope: f64) -> Result<Tensor, TensorError> {
        let out = a.data().iter().map(|&x| if x > 0.0 { x } else { slope * x }).collect();
        self.emit(OpKind::LeakyRelu(slope), "leaky_relu", &[a], a.shape().to_vec(), out)
    }

    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let out = a.data().iter().map(|x| x.tanh()).collect();
        self.emit(OpKind::Tanh, "tanh", &[a], a.shape().to_vec(), out)
    }

    pub fn softplus(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let out = a.data().iter().map(|&x| softplus_stable(x)).collect();
        self.emit(OpKind::Softplus, "softplus", &[a], a.shape().to_vec(), out)
    }

    /// Sum of absolute values; subgradient at 0 is 0.
    pub fn abs_sum(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let s: f64 = a.data().iter().map(|x| x.abs()).sum();
        self.emit(OpKind::AbsSum, "abs_sum", &[a], vec![1], vec![s])
    }

    pub fn square_sum(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let s: f64 = a.data().iter().map(|x| x * x).sum();
        self.emit(OpKind::SquareSum, "square_sum", &[a], vec![1], vec![s])
    }

    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let s: f64 = a.data().iter().sum::<f64>() / a.len() as f64;
        self.emit(OpKind::Mean, "mean", &[a], vec![1], vec![s])
    }

    /// 2D convolution over [B,Ci,H,W] with kernel [Co,Ci,k,k] and bias [Co].
    pub fn conv2d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor, TensorError> {
        let meta = conv_meta(x.shape(), w.shape(), bias.shape(), stride, pad, 0, false)?;
        let mut out = vec![0.0; meta.b * meta.co * meta.oh * meta.ow];
        let plane = meta.co * meta.oh * meta.ow;
        let kernel = |b: usize, chunk: &mut [f64]| {
            conv_forward_one(&meta, &x.data()[b * meta.ci * meta.h * meta.w..], w.data(), bias.data(), chunk)
        };
        if meta.b > 1 {
            out.par_chunks_mut(plane).enumerate().for_each(|(b, chunk)| run_conv(b, chunk, &kernel));
        } else {
            out.chunks_mut(plane).enumerate().for_each(|(b, chunk)| run_conv(b, chunk, &kernel));
        }
        let shape = vec![meta.b, meta.co, meta.oh, meta.ow];
        self.emit(OpKind::Conv2d(meta), "conv2d", &[x, w, bias], shape, out)
    }

    /// Transposed 2D convolution over [B,Ci,H,W] with kernel [Ci,Co,k,k].
    pub fn conv_transpose2d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Tensor, TensorError> {
        let meta = conv_meta(x.shape(), w.shape(), bias.shape(), stride, pad, out_pad, true)?;
        let mut out = vec![0.0; meta.b * meta.co * meta.oh * meta.ow];
        let plane = meta.co * meta.oh * meta.ow;
        let kernel = |b: usize, chunk: &mut [f64]| {
            convt_forward_one(&meta, &x.data()[b * meta.ci * meta.h * meta.w..], w.data(), bias.data(), chunk)
        };
        if meta.b > 1 {
            out.par_chunks_mut(plane).enumerate().for_each(|(b, chunk)| run_conv(b, chunk, &kernel));
        } else {
            out.chunks_mut(plane).enumerate().for_each(|(b, chunk)| run_conv(b, chunk, &kernel));
        }
        let shape = vec![meta.b, meta.co, meta.oh, meta.ow];
        self.emit(OpKind::ConvT2d(meta), "transpose_conv2d", &[x, w, bias], shape, out)
    }

    /// Per-feature standardization.
    ///
    /// Training mode with at least two rows normalizes by batch statistics
    /// (differentiable through them) and returns those statistics so the
    /// caller can update its running averages. With a single row, or in
    /// inference mode, the running averages are used as constants and no
    /// statistics are returned.
    pub fn normalize_batch(
        &mut self,
        x: &Tensor,
        running_mean: &[f64],
        running_var: &[f64],
        training: bool,
        eps: f64,
    ) -> Result<(Tensor, Option<BatchStats>), TensorError> {
        let (rows, feat, spatial) = match x.shape() {
            [b, f] => (*b, *f, 1usize),
            [b, c, h, w] => (*b, *c, h * w),
            s => return Err(mismatch("normalize_batch", format!("rank {} input", s.len()))),
        };
        if running_mean.len() != feat || running_var.len() != feat {
            return Err(mismatch(
                "normalize_batch",
                format!("{} features vs {} running stats", feat, running_mean.len()),
            ));
        }
        let use_batch = training && rows >= 2;
        let (mean, var) = if use_batch {
            batch_stats(x.data(), rows, feat, spatial)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..feat {
                let base = (r * feat + c) * spatial;
                for s in 0..spatial {
                    out[base + s] = (x.data()[base + s] - mean[c]) * inv_std[c];
                }
            }
        }
        let meta = BnMeta { feat, rows, spatial, inv_std, train: use_batch };
        let stats = use_batch.then(|| BatchStats { mean: mean.clone(), var: var.clone() });
        let t = self.emit(OpKind::BatchNorm(meta), "normalize_batch", &[x], x.shape().to_vec(), out)?;
        Ok((t, stats))
    }

    /// KL divergence of a soft histogram of `x` (values in [0,1]) against
    /// the uniform distribution over `bins` bins.
    ///
    /// Each value spreads Gaussian mass of width `tau` over the bin
    /// centers; per-value masses are normalized before pooling, so the
    /// histogram is a proper distribution.
    pub fn kl_to_uniform_hist(
        &mut self,
        x: &Tensor,
        bins: usize,
        tau: f64,
    ) -> Result<Tensor, TensorError> {
        if bins < 2 {
            return Err(TensorError::Degenerate { op: "kl_to_uniform_hist", detail: format!("bins = {}", bins) });
        }
        if tau <= 0.0 {
            return Err(TensorError::Degenerate { op: "kl_to_uniform_hist", detail: format!("tau = {}", tau) });
        }
        if x.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(TensorError::Degenerate {
                op: "kl_to_uniform_hist",
                detail: "values outside [0, 1]".into(),
            });
        }
        let p = soft_histogram(x.data(), bins, tau);
        let kl: f64 = p.iter().map(|&pk| if pk > 0.0 { pk * (pk * bins as f64).ln() } else { 0.0 }).sum();
        self.emit(OpKind::KlUniform { bins, tau }, "kl_to_uniform_hist", &[x], vec![1], vec![kl])
    }
}

fn run_conv(b: usize, chunk: &mut [f64], kernel: &(dyn Fn(usize, &mut [f64]) + Sync)) {
    kernel(b, chunk)
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, Vec<usize>), TensorError> {
    match (sa, sb) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n, vec![*m, *n])),
        ([k], [k2, n]) if k == k2 => Ok((1, *k, *n, vec![*n])),
        ([m, k], [k2]) if k == k2 => Ok((*m, *k, 1, vec![*m])),
        _ => Err(mismatch("matmul", format!("{:?} x {:?}", sa, sb))),
    }
}

pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += a[m,n] * b[k,n]^T
fn gemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * k + j] += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn softplus_stable(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_meta(
    sx: &[usize],
    sw: &[usize],
    sb: &[usize],
    stride: usize,
    pad: usize,
    out_pad: usize,
    transpose: bool,
) -> Result<ConvMeta, TensorError> {
    let name: &'static str = if transpose { "transpose_conv2d" } else { "conv2d" };
    let ([b, ci, h, w], [w0, w1, kh, kw]) = (match sx {
        [a, b, c, d] => [*a, *b, *c, *d],
        _ => return Err(mismatch(name, format!("input rank {}", sx.len()))),
    }, match sw {
        [a, b, c, d] => [*a, *b, *c, *d],
        _ => return Err(mismatch(name, format!("weight rank {}", sw.len()))),
    });
    if kh != kw {
        return Err(mismatch(name, "non-square kernel".into()));
    }
    let k = kh;
    if stride == 0 {
        return Err(mismatch(name, "stride 0".into()));
    }
    let (ci_w, co) = if transpose { (w0, w1) } else { (w1, w0) };
    if ci_w != ci {
        return Err(mismatch(name, format!("{} input channels vs weight {}", ci, ci_w)));
    }
    if sb != [co] {
        return Err(mismatch(name, format!("bias {:?} vs {} channels", sb, co)));
    }
    let (oh, ow) = if transpose {
        (stride * (h - 1) + k + out_pad - 2 * pad, stride * (w - 1) + k + out_pad - 2 * pad)
    } else {
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(mismatch(name, "kernel larger than padded input".into()));
        }
        ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
    };
    Ok(ConvMeta { b, ci, h, w, co, k, stride, pad, oh, ow })
}

fn conv_forward_one(m: &ConvMeta, x: &[f64], w: &[f64], bias: &[f64], out: &mut [f64]) {
    let (oh, ow) = (m.oh, m.ow);
    for co in 0..m.co {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        plane.fill(bias[co]);
        for ci in 0..m.ci {
            let xp = &x[ci * m.h * m.w..(ci + 1) * m.h * m.w];
            for ky in 0..m.k {
                for kx in 0..m.k {
                    let wv = w[((co * m.ci + ci) * m.k + ky) * m.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * m.stride + ky) as isize - m.pad as isize;
                        if iy < 0 || iy >= m.h as isize {
                            continue;
                        }
                        let xrow = &xp[iy as usize * m.w..(iy as usize + 1) * m.w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in 0..ow {
                            let ix = (ox * m.stride + kx) as isize - m.pad as isize;
                            if ix >= 0 && ix < m.w as isize {
                                orow[ox] += wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn convt_forward_one(m: &ConvMeta, x: &[f64], w: &[f64], bias: &[f64], out: &mut [f64]) {
    let (oh, ow) = (m.oh, m.ow);
    for co in 0..m.co {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        plane.fill(bias[co]);
        for ci in 0..m.ci {
            let xp = &x[ci * m.h * m.w..(ci + 1) * m.h * m.w];
            for ky in 0..m.k {
                for kx in 0..m.k {
                    let wv = w[((ci * m.co + co) * m.k + ky) * m.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    // out[oy,ox] += x[iy,ix]*w where oy = iy*s + ky - pad
                    for iy in 0..m.h {
                        let oy = (iy * m.stride + ky) as isize - m.pad as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        let xrow = &xp[iy * m.w..(iy + 1) * m.w];
                        let orow = &mut plane[oy as usize * ow..(oy as usize + 1) * ow];
                        for ix in 0..m.w {
                            let ox = (ix * m.stride + kx) as isize - m.pad as isize;
                            if ox >= 0 && ox < ow as isize {
                                orow[ox as usize] += wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn batch_stats(x: &[f64], rows: usize, feat: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (rows * spatial) as f64;
    let mut mean = vec![0.0; feat];
    let mut var = vec![0.0; feat];
    for r in 0..rows {
        for c in 0..feat {
            let base = (r * feat + c) * spatial;
            for s in 0..spatial {
                mean[c] += x[base + s];
            }
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    for r in 0..rows {
        for c in 0..feat {
            let base = (r * feat + c) * spatial;
            for s in 0..spatial {
                let d = x[base + s] - mean[c];
                var[c] += d * d;
            }
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    (mean, var)
}

pub(crate) fn soft_histogram(x: &[f64], bins: usize, tau: f64) -> Vec<f64> {
    let mut p = vec![0.0; bins];
    let n = x.len() as f64;
    let mut w = vec![0.0; bins];
    for &xi in x {
        let mut s = 0.0;
        for (k, wk) in w.iter_mut().enumerate() {
            let c = (k as f64 + 0.5) / bins as f64;
            let d = (xi - c) / tau;
            *wk = (-0.5 * d * d).exp();
            s += *wk;
        }
        for (pk, wk) in p.iter_mut().zip(&w) {
            *pk += wk / s / n;
        }
    }
    p
}

/// Dispatches the vector-Jacobian product of record `idx`, accumulating
/// into the gradient slots of its inputs. Constant inputs are skipped.
pub(crate) fn vjp(
    tape: &Tape,
    idx: usize,
    dy: &[f64],
    grads: &mut [Option<Vec<f64>>],
) -> Result<(), TensorError> {
    let rec = &tape.records[idx];
    let needs = |i: usize| -> bool { tape.records[rec.inputs[i] as usize].needs_grad };
    let in_val = |i: usize| -> &[f64] { tape.value_of(rec.inputs[i]) };
    let in_shape = |i: usize| -> &[usize] { &tape.records[rec.inputs[i] as usize].shape };
    match &rec.op {
        OpKind::Leaf | OpKind::Const => {}
        OpKind::Matmul => {
            let (m, k, n, _) = matmul_dims(in_shape(0), in_shape(1)).expect("validated");
            if needs(0) {
                let g = grad_slot(grads, rec.inputs[0], m * k);
                gemm_nt(m, n, k, dy, in_val(1), g);
            }
            if needs(1) {
                let g = grad_slot(grads, rec.inputs[1], k * n);
                gemm_tn(m, k, n, in_val(0), dy, g);
            }
        }
        OpKind::Add { bcast } => {
            if needs(0) {
                accumulate(grads, rec.inputs[0], dy);
            }
            if needs(1) {
                if *bcast {
                    let cols = in_val(1).len();
                    let g = grad_slot(grads, rec.inputs[1], cols);
                    for row in dy.chunks(cols) {
                        for (gi, di) in g.iter_mut().zip(row) {
                            *gi += di;
                        }
                    }
                } else {
                    accumulate(grads, rec.inputs[1], dy);
                }
            }
        }
        OpKind::Sub => {
            if needs(0) {
                accumulate(grads, rec.inputs[0], dy);
            }
            if needs(1) {
                let g = grad_slot(grads, rec.inputs[1], dy.len());
                for (gi, di) in g.iter_mut().zip(dy) {
                    *gi -= di;
                }
            }
        }
        OpKind::Mul => {
            for (a, b) in [(0, 1), (1, 0)] {
                if needs(a) {
                    let other = in_val(b);
                    let g = grad_slot(grads, rec.inputs[a], dy.len());
                    for ((gi, di), ov) in g.iter_mut().zip(dy).zip(other) {
                        *gi += di * ov;
                    }
                }
            }
        }
        OpKind::Scale(c) => {
            if needs(0) {
                let g = grad_slot(grads, rec.inputs[0], dy.len());
                for (gi, di) in g.iter_mut().zip(dy) {
                    *gi += di * c;
                }
            }
        }
        OpKind::Concat { axis } => {
            let (sa, sb) = (in_shape(0).to_vec(), in_shape(1).to_vec());
            let outer: usize = sa[..*axis].iter().product();
            let inner: usize = sa[*axis + 1..].iter().product();
            let (ba, bb) = (sa[*axis] * inner, sb[*axis] * inner);
            for (slot, offset, block) in [(0usize, 0usize, ba), (1, ba, bb)] {
                if needs(slot) {
                    let len = outer * block;
                    let g = grad_slot(grads, rec.inputs[slot], len);
                    for o in 0..outer {
                        let src = &dy[o * (ba + bb) + offset..o * (ba + bb) + offset + block];
                        let dst = &mut g[o * block..(o + 1) * block];
                        for (gi, di) in dst.iter_mut().zip(src) {
                            *gi += di;
                        }
                    }
                }
            }
        }
        OpKind::Reshape => {
            if needs(0) {
                accumulate(grads, rec.inputs[0], dy);
            }
        }
        OpKind::LeakyRelu(slope) => {
            if needs(0) {
                let x = in_val(0);
                let g = grad_slot(grads, rec.inputs[0], dy.len());
                for ((gi, di), &xv) in g.iter_mut().zip(dy).zip(x) {
                    *gi += di * if xv > 0.0 { 1.0 } else { *slope };
                }
            }
        }
        OpKind::Tanh => {
            if needs(0) {
                let y = &rec.value;
                let g = grad_slot(grads, rec.inputs[0], dy.len());
                for ((gi, di), yv) in g.iter_mut().zip(dy).zip(y.iter()) {
                    *gi += di * (1.0 - yv * yv);
                }
            }
        }
        OpKind::Softplus => {
            if needs(0) {
                let x = in_val(0);
                let g = grad_slot(grads, rec.inputs[0], dy.len());
                for ((gi, di), &xv) in g.iter_mut().zip(dy).zip(x) {
                    *gi += di * sigmoid(xv);
                }
            }
        }
        OpKind::AbsSum => {
            if needs(0) {
                let x = in_val(0);
                let d = dy[0];
                let g = grad_slot(grads, rec.inputs[0], x.len());
                for (gi, &xv) in g.iter_mut().zip(x) {
                    *gi += d * if xv > 0.0 {
                        1.0
                    } else if xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
            }
        }
        OpKind::SquareSum => {
            if needs(0) {
                let x = in_val(0);
                let d = dy[0];
                let g = grad_slot(grads, rec.inputs[0], x.len());
                for (gi, &xv) in g.iter_mut().zip(x) {
                    *gi += d * 2.0 * xv;
                }
            }
        }
        OpKind::Mean => {
            if needs(0) {
                let n = in_val(0).len();
                let d = dy[0] / n as f64;
                let g = grad_slot(grads, rec.inputs[0], n);
                for gi in g.iter_mut() {
                    *gi += d;
                }
            }
        }
        OpKind::Conv2d(m) => {
            let (x, w) = (in_val(0), in_val(1));
            if needs(0) {
                let g = grad_slot(grads, rec.inputs[0], x.len());
                conv_backward_input(m, dy, w, g);
            }
            if needs(1) {
                let g = grad_slot(grads, rec.inputs[1], w.len());
                conv_backward_weight(m, dy, x, g);
            }
            if needs(2) {
                let g = grad_slot(grads, rec.inputs[2], m.co);
                conv_backward_bias(m, dy, g);
            }
        }
        OpKind::ConvT2d(m) => {
            let (x, w) = (in_val(0), in_val(1));
            if needs(0) {
                let g = grad_slot(grads, rec.inputs[0], x.len());
                convt_backward_input(m, dy, w, g);
            }
            if needs(1) {
                let g = grad_slot(grads, rec.inputs[1], w.len());
                convt_backward_weight(m, dy, x, g);
            }
            if needs(2) {
                let g = grad_slot(grads, rec.inputs[2], m.co);
                conv_backward_bias(m, dy, g);
            }
        }
        OpKind::BatchNorm(m) => {
            if needs(0) {
                let xhat = &rec.value;
                let g = grad_slot(grads, rec.inputs[0], dy.len());
                if m.train {
                    let nred = (m.rows * m.spatial) as f64;
                    for c in 0..m.feat {
                        let mut sum_dy = 0.0;
                        let mut sum_dyx = 0.0;
                        for r in 0..m.rows {
                            let base = (r * m.feat + c) * m.spatial;
                            for s in 0..m.spatial {
                                sum_dy += dy[base + s];
                                sum_dyx += dy[base + s] * xhat[base + s];
                            }
                        }
                        let (mdy, mdyx) = (sum_dy / nred, sum_dyx / nred);
                        for r in 0..m.rows {
                            let base = (r * m.feat + c) * m.spatial;
                            for s in 0..m.spatial {
                                g[base + s] +=
                                    m.inv_std[c] * (dy[base + s] - mdy - xhat[base + s] * mdyx);
                            }
                        }
                    }
                } else {
                    for r in 0..m.rows {
                        for c in 0..m.feat {
                            let base = (r * m.feat + c) * m.spatial;
                            for s in 0..m.spatial {
                                g[base + s] += dy[base + s] * m.inv_std[c];
                            }
                        }
                    }
                }
            }
        }
        OpKind::KlUniform { bins, tau } => {
            if needs(0) {
                let x = in_val(0);
                let n = x.len() as f64;
                let p = soft_histogram(x, *bins, *tau);
                let dkl: Vec<f64> =
                    p.iter().map(|&pk| (pk * *bins as f64).ln() + 1.0).collect();
                let d = dy[0];
                let g = grad_slot(grads, rec.inputs[0], x.len());
                let mut w = vec![0.0; *bins];
                let mut wp = vec![0.0; *bins];
                for (gi, &xi) in g.iter_mut().zip(x) {
                    let mut s = 0.0;
                    let mut sp = 0.0;
                    for k in 0..*bins {
                        let c = (k as f64 + 0.5) / *bins as f64;
                        let dd = (xi - c) / tau;
                        w[k] = (-0.5 * dd * dd).exp();
                        wp[k] = w[k] * (c - xi) / (tau * tau);
                        s += w[k];
                        sp += wp[k];
                    }
                    let mut term = 0.0;
                    let mut mix = 0.0;
                    for k in 0..*bins {
                        term += dkl[k] * wp[k];
                        mix += dkl[k] * w[k];
                    }
                    *gi += d * (term - mix * sp / s) / (n * s);
                }
            }
        }
    }
    Ok(())
}

fn conv_backward_input(m: &ConvMeta, dy: &[f64], w: &[f64], dx: &mut [f64]) {
    let xplane = m.ci * m.h * m.w;
    let yplane = m.co * m.oh * m.ow;
    let kernel = |b: usize, dxb: &mut [f64]| {
        let dyb = &dy[b * yplane..(b + 1) * yplane];
        for co in 0..m.co {
            let dyp = &dyb[co * m.oh * m.ow..(co + 1) * m.oh * m.ow];
            for ci in 0..m.ci {
                let dxp = &mut dxb[ci * m.h * m.w..(ci + 1) * m.h * m.w];
                for ky in 0..m.k {
                    for kx in 0..m.k {
                        let wv = w[((co * m.ci + ci) * m.k + ky) * m.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..m.oh {
                            let iy = (oy * m.stride + ky) as isize - m.pad as isize;
                            if iy < 0 || iy >= m.h as isize {
                                continue;
                            }
                            for ox in 0..m.ow {
                                let ix = (ox * m.stride + kx) as isize - m.pad as isize;
                                if ix >= 0 && ix < m.w as isize {
                                    dxp[iy as usize * m.w + ix as usize] += wv * dyp[oy * m.ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    if m.b > 1 {
        dx.par_chunks_mut(xplane).enumerate().for_each(|(b, c)| kernel(b, c));
    } else {
        dx.chunks_mut(xplane).enumerate().for_each(|(b, c)| kernel(b, c));
    }
}

fn conv_backward_weight(m: &ConvMeta, dy: &[f64], x: &[f64], dw: &mut [f64]) {
    let xplane = m.ci * m.h * m.w;
    let yplane = m.co * m.oh * m.ow;
    let wplane = m.ci * m.k * m.k;
    let kernel = |co: usize, dwc: &mut [f64]| {
        for b in 0..m.b {
            let dyp = &dy[b * yplane + co * m.oh * m.ow..b * yplane + (co + 1) * m.oh * m.ow];
            for ci in 0..m.ci {
                let xp = &x[b * xplane + ci * m.h * m.w..b * xplane + (ci + 1) * m.h * m.w];
                for ky in 0..m.k {
                    for kx in 0..m.k {
                        let mut acc = 0.0;
                        for oy in 0..m.oh {
                            let iy = (oy * m.stride + ky) as isize - m.pad as isize;
                            if iy < 0 || iy >= m.h as isize {
                                continue;
                            }
                            for ox in 0..m.ow {
                                let ix = (ox * m.stride + kx) as isize - m.pad as isize;
                                if ix >= 0 && ix < m.w as isize {
                                    acc += dyp[oy * m.ow + ox] * xp[iy as usize * m.w + ix as usize];
                                }
                            }
                        }
                        dwc[(ci * m.k + ky) * m.k + kx] += acc;
                    }
                }
            }
        }
    };
    if m.co > 1 {
        dw.par_chunks_mut(wplane).enumerate().for_each(|(co, c)| kernel(co, c));
    } else {
        dw.chunks_mut(wplane).enumerate().for_each(|(co, c)| kernel(co, c));
    }
}

fn conv_backward_bias(m: &ConvMeta, dy: &[f64], db: &mut [f64]) {
    let yplane = m.co * m.oh * m.ow;
    for b in 0..m.b {
        for co in 0..m.co {
            let dyp = &dy[b * yplane + co * m.oh * m.ow..b * yplane + (co + 1) * m.oh * m.ow];
            db[co] += dyp.iter().sum::<f64>();
        }
    }
}

fn convt_backward_input(m: &ConvMeta, dy: &[f64], w: &[f64], dx: &mut [f64]) {
    let xplane = m.ci * m.h * m.w;
    let yplane = m.co * m.oh * m.ow;
    let kernel = |b: usize, dxb: &mut [f64]| {
        let dyb = &dy[b * yplane..(b + 1) * yplane];
        for ci in 0..m.ci {
            let dxp = &mut dxb[ci * m.h * m.w..(ci + 1) * m.h * m.w];
            for co in 0..m.co {
                let dyp = &dyb[co * m.oh * m.ow..(co + 1) * m.oh * m.ow];
                for ky in 0..m.k {
                    for kx in 0..m.k {
                        let wv = w[((ci * m.co + co) * m.k + ky) * m.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for iy in 0..m.h {
                            let oy = (iy * m.stride + ky) as isize - m.pad as isize;
                            if oy < 0 || oy >= m.oh as isize {
                                continue;
                            }
                            for ix in 0..m.w {
                                let ox = (ix * m.stride + kx) as isize - m.pad as isize;
                                if ox >= 0 && ox < m.ow as isize {
                                    dxp[iy * m.w + ix] += wv * dyp[oy as usize * m.ow + ox as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    if m.b > 1 {
        dx.par_chunks_mut(xplane).enumerate().for_each(|(b, c)| kernel(b, c));
    } else {
        dx.chunks_mut(xplane).enumerate().for_each(|(b, c)| kernel(b, c));
    }
}

fn convt_backward_weight(m: &ConvMeta, dy: &[f64], x: &[f64], dw: &mut [f64]) {
    let xplane = m.ci * m.h * m.w;
    let yplane = m.co * m.oh * m.ow;
    let wplane = m.co * m.k * m.k;
    let kernel = |ci: usize, dwc: &mut [f64]| {
        for b in 0..m.b {
            let xp = &x[b * xplane + ci * m.h * m.w..b * xplane + (ci + 1) * m.h * m.w];
            for co in 0..m.co {
                let dyp = &dy[b * yplane + co * m.oh * m.ow..b * yplane + (co + 1) * m.oh * m.ow];
                for ky in 0..m.k {
                    for kx in 0..m.k {
                        let mut acc = 0.0;
                        for iy in 0..m.h {
                            let oy = (iy * m.stride + ky) as isize - m.pad as isize;
                            if oy < 0 || oy >= m.oh as isize {
                                continue;
                            }
                            for ix in 0..m.w {
                                let ox = (ix * m.stride + kx) as isize - m.pad as isize;
                                if ox >= 0 && ox < m.ow as isize {
                                    acc += xp[iy * m.w + ix] * dyp[oy as usize * m.ow + ox as usize];
                                }
                            }
                        }
                        dwc[(co * m.k + ky) * m.k + kx] += acc;
                    }
                }
            }
        }
    };
    if m.ci > 1 {
        dw.par_chunks_mut(wplane).enumerate().for_each(|(ci, c)| kernel(ci, c));
    } else {
        dw.chunks_mut(wplane).enumerate().for_each(|(ci, c)| kernel(ci, c));
    }
}

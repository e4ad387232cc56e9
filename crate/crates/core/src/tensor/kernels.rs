//! Forward and backward kernels operating on plain tensors.
//!
//! These functions know nothing about the graph; [`super::Graph`] records
//! which kernel produced a node and calls the matching backward here.

use super::{Element, Shape, Tensor};
use crate::error::{Error, Result};

/// Output extent of a sliding window along one axis.
pub fn window_out(len: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel {kernel} and stride {stride} must be positive"
        )));
    }
    let padded = len + 2 * pad;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "window {kernel} larger than padded extent {padded}: non-positive output size"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }
    fn cols_len(&self) -> usize {
        self.cols_rows() * self.oh * self.ow
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn conv_geom(x: Shape, w: Shape, stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.c != w.c {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input {x} vs weight {w}"
        )));
    }
    let oh = window_out(x.h, w.h, stride, pad)?;
    let ow = window_out(x.w, w.w, stride, pad)?;
    Ok(ConvGeom {
        in_c: x.c,
        h: x.h,
        w: x.w,
        kh: w.h,
        kw: w.w,
        stride,
        pad,
        oh,
        ow,
    })
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.oh * g.ow;
    for c in 0..g.in_c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.oh * g.ow;
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x` with `weight` (`outC x inC x kH x kW`) plus a
/// per-output-channel bias (`1 x outC x 1 x 1`).
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(x.shape(), weight.shape(), stride, pad)?;
    let out_c = weight.shape().n;
    if let Some(b) = bias {
        if b.shape().numel() != out_c {
            return Err(Error::Shape(format!(
                "conv2d bias {} does not match {out_c} output channels",
                b.shape()
            )));
        }
    }
    let n = x.shape().n;
    let p = g.oh * g.ow;
    let k = g.cols_rows();
    let out_shape = Shape::new(n, out_c, g.oh, g.ow);
    let mut out = vec![T::zero(); out_shape.numel()];
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { g.cols_len() }];
    let in_len = g.in_c * g.h * g.w;
    for b in 0..n {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let colp = if g.is_pointwise() {
            xb.as_ptr()
        } else {
            im2col(xb, &g, &mut cols);
            cols.as_ptr()
        };
        let ob = &mut out[b * out_c * p..(b + 1) * out_c * p];
        if let Some(bias) = bias {
            for (oc, chunk) in ob.chunks_mut(p).enumerate() {
                chunk.fill(bias.data()[oc]);
            }
        }
        // SAFETY: slices have exactly the extents described by the strides.
        unsafe {
            T::gemm(
                out_c,
                k,
                p,
                T::one(),
                weight.data().as_ptr(),
                k as isize,
                1,
                colp,
                p as isize,
                1,
                if bias.is_some() { T::one() } else { T::zero() },
                ob.as_mut_ptr(),
                p as isize,
                1,
            );
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &[T],
    stride: usize,
    pad: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let g = conv_geom(x.shape(), weight.shape(), stride, pad).expect("validated in forward");
    let out_c = weight.shape().n;
    let n = x.shape().n;
    let p = g.oh * g.ow;
    let k = g.cols_rows();
    let in_len = g.in_c * g.h * g.w;
    let mut dx = vec![T::zero(); x.shape().numel()];
    let mut dw = vec![T::zero(); weight.shape().numel()];
    let mut db = vec![T::zero(); out_c];
    let mut cols = vec![T::zero(); g.cols_len()];
    let mut dcols = vec![T::zero(); g.cols_len()];
    for b in 0..n {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let dob = &dout[b * out_c * p..(b + 1) * out_c * p];
        for (oc, chunk) in dob.chunks(p).enumerate() {
            db[oc] += chunk.iter().copied().sum::<T>();
        }
        let colp = if g.is_pointwise() {
            xb.as_ptr()
        } else {
            im2col(xb, &g, &mut cols);
            cols.as_ptr()
        };
        // SAFETY: see conv2d.
        unsafe {
            // dW[outC, K] += dOut[outC, P] * cols[K, P]^T
            T::gemm(
                out_c,
                p,
                k,
                T::one(),
                dob.as_ptr(),
                p as isize,
                1,
                colp,
                1,
                p as isize,
                T::one(),
                dw.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        let dxb = &mut dx[b * in_len..(b + 1) * in_len];
        let target = if g.is_pointwise() {
            dxb.as_mut_ptr()
        } else {
            dcols.as_mut_ptr()
        };
        // SAFETY: see conv2d.
        unsafe {
            // dCols[K, P] = W^T[K, outC] * dOut[outC, P]
            T::gemm(
                k,
                out_c,
                p,
                T::one(),
                weight.data().as_ptr(),
                1,
                k as isize,
                dob.as_ptr(),
                p as isize,
                1,
                T::zero(),
                target,
                p as isize,
                1,
            );
        }
        if !g.is_pointwise() {
            col2im(&dcols, &g, dxb);
        }
    }
    (dx, dw, db)
}

/// Window maximum with implicit `-inf` padding. Also returns, for each output
/// element, the flat input index of the first (row-major) maximal element.
pub fn max_pool2d<T: Element>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    check_pool_pad(kernel, pad)?;
    let s = x.shape();
    let oh = window_out(s.h, kernel, stride, pad)?;
    let ow = window_out(s.w, kernel, stride, pad)?;
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut arg = Vec::with_capacity(out_shape.numel());
    for plane in 0..s.n * s.c {
        let base = plane * s.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= s.w as isize {
                            continue;
                        }
                        let i = base + iy as usize * s.w + ix as usize;
                        let v = x.data()[i];
                        if best_i == usize::MAX || v > best {
                            best = v;
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::from_vec(out_shape, out)?, arg))
}

fn check_pool_pad(kernel: usize, pad: usize) -> Result<()> {
    if 2 * pad > kernel {
        return Err(Error::InvalidArgument(format!(
            "pool padding {pad} exceeds half the kernel {kernel}"
        )));
    }
    Ok(())
}

/// Window mean with zero padding counted in the divisor (`kernel^2`).
pub fn avg_pool2d<T: Element>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    check_pool_pad(kernel, pad)?;
    let s = x.shape();
    let oh = window_out(s.h, kernel, stride, pad)?;
    let ow = window_out(s.w, kernel, stride, pad)?;
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let inv = T::one() / T::from_usize(kernel * kernel).unwrap();
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in 0..s.n * s.c {
        let data = &x.data()[plane * s.plane()..(plane + 1) * s.plane()];
        for oy in 0..oh {
            let (y0, y1) = clip_window(oy, kernel, stride, pad, s.h);
            for ox in 0..ow {
                let (x0, x1) = clip_window(ox, kernel, stride, pad, s.w);
                let mut acc = T::zero();
                for iy in y0..y1 {
                    for v in &data[iy * s.w + x0..iy * s.w + x1] {
                        acc += *v;
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

fn clip_window(o: usize, kernel: usize, stride: usize, pad: usize, len: usize) -> (usize, usize) {
    let start = (o * stride) as isize - pad as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + kernel as isize).max(0) as usize).min(len);
    (lo, hi.max(lo))
}

pub fn avg_pool2d_backward<T: Element>(
    in_shape: Shape,
    dout: &[T],
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let oh = window_out(in_shape.h, kernel, stride, pad).expect("validated");
    let ow = window_out(in_shape.w, kernel, stride, pad).expect("validated");
    let inv = T::one() / T::from_usize(kernel * kernel).unwrap();
    let mut dx = vec![T::zero(); in_shape.numel()];
    for plane in 0..in_shape.n * in_shape.c {
        let dplane = &mut dx[plane * in_shape.plane()..(plane + 1) * in_shape.plane()];
        let go = &dout[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1) = clip_window(oy, kernel, stride, pad, in_shape.h);
            for ox in 0..ow {
                let (x0, x1) = clip_window(ox, kernel, stride, pad, in_shape.w);
                let g = go[oy * ow + ox] * inv;
                for iy in y0..y1 {
                    for v in &mut dplane[iy * in_shape.w + x0..iy * in_shape.w + x1] {
                        *v += g;
                    }
                }
            }
        }
    }
    dx
}

/// Source taps for one output coordinate of a half-pixel bilinear resize:
/// `(lo, hi, weight_of_hi)`.
pub fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

pub fn bilinear_resize<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resize target must be at least 1x1".into()));
    }
    let s = x.shape();
    if s.h == out_h && s.w == out_w {
        return Ok(x.clone());
    }
    let ty = bilinear_taps(out_h, s.h);
    let tx = bilinear_taps(out_w, s.w);
    let out_shape = s.with_hw(out_h, out_w);
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in 0..s.n * s.c {
        let d = &x.data()[plane * s.plane()..(plane + 1) * s.plane()];
        for &(y0, y1, fy) in &ty {
            let fy = T::from_f64c(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::from_f64c(fx);
                let top = d[y0 * s.w + x0] * (T::one() - fx) + d[y0 * s.w + x1] * fx;
                let bot = d[y1 * s.w + x0] * (T::one() - fx) + d[y1 * s.w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub fn bilinear_resize_backward<T: Element>(in_shape: Shape, out_h: usize, out_w: usize, dout: &[T]) -> Vec<T> {
    if in_shape.h == out_h && in_shape.w == out_w {
        return dout.to_vec();
    }
    let ty = bilinear_taps(out_h, in_shape.h);
    let tx = bilinear_taps(out_w, in_shape.w);
    let mut dx = vec![T::zero(); in_shape.numel()];
    let w = in_shape.w;
    for plane in 0..in_shape.n * in_shape.c {
        let d = &mut dx[plane * in_shape.plane()..(plane + 1) * in_shape.plane()];
        let go = &dout[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64c(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64c(fx);
                let g = go[oy * out_w + ox];
                d[y0 * w + x0] += g * (T::one() - fy) * (T::one() - fx);
                d[y0 * w + x1] += g * (T::one() - fy) * fx;
                d[y1 * w + x0] += g * fy * (T::one() - fx);
                d[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

/// Per-channel batch statistics `(mean, biased variance)` over N, H, W.
pub fn channel_moments<T: Element>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let s = x.shape();
    let m = s.n * s.plane();
    if m == 0 {
        return Err(Error::Shape("batch norm needs at least one element per channel".into()));
    }
    let mf = T::from_usize(m).unwrap();
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            let off = (n * s.c + c) * s.plane();
            acc += x.data()[off..off + s.plane()].iter().copied().sum::<T>();
        }
        let mu = acc / mf;
        let mut sq = T::zero();
        for n in 0..s.n {
            let off = (n * s.c + c) * s.plane();
            for &v in &x.data()[off..off + s.plane()] {
                sq += (v - mu) * (v - mu);
            }
        }
        mean[c] = mu;
        var[c] = sq / mf;
    }
    Ok((mean, var))
}

/// Applies `gamma * (x - mean) * inv_std + beta` per channel; returns the output
/// and the normalized input.
pub fn batch_norm_apply<T: Element>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    inv_std: &[T],
) -> (Tensor<T>, Vec<T>) {
    let s = x.shape();
    let mut out = Vec::with_capacity(s.numel());
    let mut xhat = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * s.plane();
            for &v in &x.data()[off..off + s.plane()] {
                let h = (v - mean[c]) * inv_std[c];
                xhat.push(h);
                out.push(gamma[c] * h + beta[c]);
            }
        }
    }
    (Tensor::from_vec(s, out).expect("same shape"), xhat)
}

/// Batched matrix product over the trailing two axes:
/// `a: (N, C, M, K)`, `b: (N, C, K, P)` (or `(N, C, P, K)` when `trans_b`).
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    let (bk, bp) = if trans_b { (sb.w, sb.h) } else { (sb.h, sb.w) };
    if sa.n != sb.n || sa.c != sb.c || sa.w != bk {
        return Err(Error::Shape(format!(
            "matmul dimension mismatch: {sa} x {sb}{}",
            if trans_b { "^T" } else { "" }
        )));
    }
    let (m, k, p) = (sa.h, sa.w, bp);
    let out_shape = Shape::new(sa.n, sa.c, m, p);
    let mut out = vec![T::zero(); out_shape.numel()];
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (p as isize, 1) };
    for batch in 0..sa.n * sa.c {
        // SAFETY: each batch slab is contiguous with the described extents.
        unsafe {
            T::gemm(
                m,
                k,
                p,
                T::one(),
                a.data().as_ptr().add(batch * m * k),
                k as isize,
                1,
                b.data().as_ptr().add(batch * k * p),
                rsb,
                csb,
                T::zero(),
                out.as_mut_ptr().add(batch * m * p),
                p as isize,
                1,
            );
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Gradients of [`matmul`] with respect to both operands.
pub fn matmul_backward<T: Element>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool, dout: &[T]) -> (Vec<T>, Vec<T>) {
    let (sa, sb) = (a.shape(), b.shape());
    let (m, k) = (sa.h, sa.w);
    let p = if trans_b { sb.h } else { sb.w };
    let mut da = vec![T::zero(); sa.numel()];
    let mut db = vec![T::zero(); sb.numel()];
    for batch in 0..sa.n * sa.c {
        let ap = unsafe { a.data().as_ptr().add(batch * m * k) };
        let bp = unsafe { b.data().as_ptr().add(batch * k * p) };
        let gp = unsafe { dout.as_ptr().add(batch * m * p) };
        // SAFETY: slabs are contiguous with the described extents.
        unsafe {
            // dA[M,K] = dOut[M,P] * B'^T where B' is the effective K x P operand.
            let (rsb, csb) = if trans_b { (k as isize, 1) } else { (1, p as isize) };
            T::gemm(
                m,
                p,
                k,
                T::one(),
                gp,
                p as isize,
                1,
                bp,
                rsb,
                csb,
                T::zero(),
                da.as_mut_ptr().add(batch * m * k),
                k as isize,
                1,
            );
            if trans_b {
                // B is stored P x K: dB[P,K] = dOut^T[P,M] * A[M,K]
                T::gemm(
                    p,
                    m,
                    k,
                    T::one(),
                    gp,
                    1,
                    p as isize,
                    ap,
                    k as isize,
                    1,
                    T::zero(),
                    db.as_mut_ptr().add(batch * k * p),
                    k as isize,
                    1,
                );
            } else {
                // dB[K,P] = A^T[K,M] * dOut[M,P]
                T::gemm(
                    k,
                    m,
                    p,
                    T::one(),
                    ap,
                    1,
                    k as isize,
                    gp,
                    p as isize,
                    1,
                    T::zero(),
                    db.as_mut_ptr().add(batch * k * p),
                    p as isize,
                    1,
                );
            }
        }
    }
    (da, db)
}

pub fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Element>(v: T) -> T {
    let k = T::from_f64c(GELU_K);
    let c = T::from_f64c(GELU_C);
    let half = T::from_f64c(0.5);
    half * v * (T::one() + (k * (v + c * v * v * v)).tanh())
}

pub fn gelu_grad<T: Element>(v: T) -> T {
    let k = T::from_f64c(GELU_K);
    let c = T::from_f64c(GELU_C);
    let half = T::from_f64c(0.5);
    let three = T::from_f64c(3.0);
    let u = k * (v + c * v * v * v);
    let t = u.tanh();
    half * (T::one() + t) + half * v * (T::one() - t * t) * k * (T::one() + three * c * v * v)
}

/// Softmax across the channel axis independently at every pixel.
pub fn softmax_channels<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let mut out = vec![T::zero(); s.numel()];
    let plane = s.plane();
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let mut mx = T::neg_infinity();
            for c in 0..s.c {
                mx = mx.max(x.data()[base + c * plane + p]);
            }
            let mut total = T::zero();
            for c in 0..s.c {
                let e = (x.data()[base + c * plane + p] - mx).exp();
                out[base + c * plane + p] = e;
                total += e;
            }
            for c in 0..s.c {
                out[base + c * plane + p] = out[base + c * plane + p] / total;
            }
        }
    }
    Tensor::from_vec(s, out).expect("same shape")
}

/// Softmax along the last axis (rows of a token matrix).
pub fn softmax_rows<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(s.w) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::from_vec(s, out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_out_arithmetic() {
        assert_eq!(window_out(4, 3, 2, 1).unwrap(), 2);
        assert_eq!(window_out(1, 3, 2, 1).unwrap(), 1);
        assert_eq!(window_out(2, 3, 2, 1).unwrap(), 1);
        assert_eq!(window_out(3, 3, 2, 1).unwrap(), 2);
        assert!(window_out(1, 3, 1, 0).is_err());
    }

    #[test]
    fn bilinear_taps_half_pixel() {
        // 2 -> 4: sources at -0.25 (clamped), 0.25, 0.75, 1.25
        let t = bilinear_taps(4, 2);
        assert_eq!(t[0], (0, 1, 0.0));
        assert_eq!(t[1], (0, 1, 0.25));
        assert_eq!(t[2], (0, 1, 0.75));
        assert_eq!(t[3], (1, 1, 0.0));
    }

    #[test]
    fn pool_padding_bound() {
        let x = Tensor::<f64>::ones(Shape::new(1, 1, 4, 4));
        assert!(max_pool2d(&x, 2, 2, 2).is_err());
        assert!(avg_pool2d(&x, 3, 1, 2).is_err());
    }

    #[test]
    fn softmax_rows_normalize() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 3), vec![1.0f64, 2.0, 3.0, -1.0, 0.0, 5.0]).unwrap();
        let y = softmax_rows(&x);
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &v in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(v + h) - gelu(v - h)) / (2.0 * h);
            assert!((fd - gelu_grad(v)).abs() < 1e-8);
        }
    }
}

use std::rc::Rc;

use super::graph::{broadcast_index, Op};
use super::kernels;
use super::{Element, Graph, Shape, Tensor, Var};
use crate::error::{Error, Result};

/// Statistics source for batch normalization.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a, T> {
    /// Normalize with the current batch's per-channel moments.
    Train,
    /// Normalize with supplied running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

impl<T: Element> Graph<T> {
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let ws = self.shape(w);
        let macs = (out.shape().numel() * ws.c * ws.h * ws.w) as u64;
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            out,
            macs,
        ))
    }

    /// Batch normalization. In training mode also returns the batch mean and
    /// biased variance so the caller can update running statistics.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        if eps <= T::zero() {
            return Err(Error::InvalidArgument("batch norm eps must be positive".into()));
        }
        let c = self.shape(x).c;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v).numel() != c {
                return Err(Error::Shape(format!(
                    "batch norm {name} has {} entries for {c} channels",
                    self.shape(v).numel()
                )));
            }
        }
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                let (m, v) = kernels::channel_moments(self.value(x))?;
                (m.clone(), v.clone(), Some((m, v)))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape(format!(
                        "running statistics of length {} for {c} channels",
                        mean.len()
                    )));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = kernels::batch_norm_apply(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            &mean,
            &inv_std,
        );
        let batch_stats = stats.is_some();
        let v = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            out,
            0,
        );
        Ok((v, stats))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2d(self.value(x), kernel, stride, pad)?;
        Ok(self.push(Op::MaxPool { x, argmax }, out, 0))
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::avg_pool2d(self.value(x), kernel, stride, pad)?;
        Ok(self.push(
            Op::AvgPool {
                x,
                kernel,
                stride,
                pad,
            },
            out,
            0,
        ))
    }

    /// Bilinear resize with half-pixel centers (`align_corners = false`).
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if self.shape(x).h == out_h && self.shape(x).w == out_w {
            return Ok(x);
        }
        let out = kernels::bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push(Op::Resize { x }, out, 0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        self.push(Op::Sigmoid { x }, out, 0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(Op::Relu { x }, out, 0)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        self.push(Op::Gelu { x }, out, 0)
    }

    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let out = kernels::softmax_channels(self.value(x));
        self.push(Op::SoftmaxChannels { x }, out, 0)
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = kernels::softmax_rows(self.value(x));
        self.push(Op::SoftmaxRows { x }, out, 0)
    }

    fn check_broadcast(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || (sb.c == 1 && sb.with_c(sa.c) == sa) {
            Ok(())
        } else {
            Err(Error::Shape(format!("{what}: incompatible shapes {sa} and {sb}")))
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let plane = sa.plane();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[broadcast_index(i, sa, sb, plane)]))
            .collect();
        Tensor::from_vec(sa, data).expect("same shape")
    }

    /// `a + b`; `b` may be a single-channel map broadcast over `a`'s channels.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast(a, b, "add")?;
        let out = self.binary(a, b, |x, y| x + y);
        Ok(self.push(Op::Add { a, b }, out, 0))
    }

    /// `a * b`; `b` may be a single-channel map broadcast over `a`'s channels.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast(a, b, "mul")?;
        let out = self.binary(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul { a, b }, out, 0))
    }

    pub fn scalar_mul(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(Op::ScalarMul { x, s }, out, 0)
    }

    /// `c - x` elementwise; with `c = 1` this is the attention reversal.
    pub fn sub_from_scalar(&mut self, c: T, x: Var) -> Var {
        let out = self.value(x).map(|v| c - v);
        self.push(Op::SubFromScalar { x }, out, 0)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Shape("concat of an empty list".into()))?;
        let s0 = self.shape(first);
        let mut total_c = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.n != s0.n || s.h != s0.h || s.w != s0.w {
                return Err(Error::Shape(format!("concat: {s} does not match {s0}")));
            }
            total_c += s.c;
        }
        let out_shape = s0.with_c(total_c);
        let plane = s0.plane();
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..s0.n {
            for &x in xs {
                let v = self.value(x);
                let c = v.shape().c;
                data.extend_from_slice(&v.data()[n * c * plane..(n + 1) * c * plane]);
            }
        }
        let out = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(Op::Concat { xs: xs.to_vec() }, out, 0))
    }

    /// Output element `i` takes input element `index[i]`.
    pub fn gather(&mut self, x: Var, out_shape: Shape, index: Vec<usize>) -> Result<Var> {
        if index.len() != out_shape.numel() {
            return Err(Error::Shape("gather index length does not match output shape".into()));
        }
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Shape(format!("gather index {bad} out of bounds")));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(
            Op::Gather {
                x,
                index: Rc::new(index),
            },
            out,
            0,
        ))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if len == 0 || start + len > s.c {
            return Err(Error::Shape(format!("channel slice {start}+{len} of {s}")));
        }
        let plane = s.plane();
        let mut index = Vec::with_capacity(s.n * len * plane);
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            index.extend(base..base + len * plane);
        }
        self.gather(x, s.with_c(len), index)
    }

    /// `(N, C, H, W)` to token layout `(N, 1, H*W, C)`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let plane = s.plane();
        let mut index = Vec::with_capacity(s.numel());
        for n in 0..s.n {
            for p in 0..plane {
                for c in 0..s.c {
                    index.push((n * s.c + c) * plane + p);
                }
            }
        }
        self.gather(x, Shape::new(s.n, 1, plane, s.c), index)
    }

    /// Token layout `(N, 1, H*W, C)` back to `(N, C, H, W)`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.c != 1 || s.h != h * w {
            return Err(Error::Shape(format!("{s} is not a token map of {h}x{w}")));
        }
        let c = s.w;
        let mut index = Vec::with_capacity(s.numel());
        for n in 0..s.n {
            for ch in 0..c {
                for p in 0..h * w {
                    index.push((n * h * w + p) * c + ch);
                }
            }
        }
        self.gather(x, Shape::new(s.n, c, h, w), index)
    }

    /// `(N, 1, T, C)` to `(N, heads, T, C / heads)`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.c != 1 || heads == 0 || !s.w.is_multiple_of(heads) {
            return Err(Error::Shape(format!("cannot split {s} into {heads} heads")));
        }
        let dh = s.w / heads;
        let mut index = Vec::with_capacity(s.numel());
        for n in 0..s.n {
            for hd in 0..heads {
                for t in 0..s.h {
                    for d in 0..dh {
                        index.push((n * s.h + t) * s.w + hd * dh + d);
                    }
                }
            }
        }
        self.gather(x, Shape::new(s.n, heads, s.h, dh), index)
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let (heads, dh) = (s.c, s.w);
        let mut index = Vec::with_capacity(s.numel());
        for n in 0..s.n {
            for t in 0..s.h {
                for hd in 0..heads {
                    for d in 0..dh {
                        index.push(((n * heads + hd) * s.h + t) * dh + d);
                    }
                }
            }
        }
        self.gather(x, Shape::new(s.n, 1, s.h, heads * dh), index)
    }

    /// Batched product over the trailing two axes, optionally with `b` transposed.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b), trans_b)?;
        let sa = self.shape(a);
        let macs = (out.shape().numel() * sa.w) as u64;
        Ok(self.push(Op::Matmul { a, b, trans_b }, out, macs))
    }

    /// Affine map over the last axis. `w` has shape `(1, 1, out, in)` and `b` holds `out` entries.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (dout, din) = (ws.h, ws.w);
        if xs.w != din || self.shape(b).numel() != dout {
            return Err(Error::Shape(format!(
                "linear dimension mismatch: input {xs}, weight {ws}, bias {}",
                self.shape(b)
            )));
        }
        let rows = xs.numel() / din;
        let out_shape = Shape { w: dout, ..xs };
        let bias = self.value(b).data();
        let mut out: Vec<T> = (0..rows).flat_map(|_| bias.iter().copied()).collect();
        // SAFETY: contiguous row-major buffers with the stated extents.
        unsafe {
            T::gemm(
                rows,
                din,
                dout,
                T::one(),
                self.value(x).data().as_ptr(),
                din as isize,
                1,
                self.value(w).data().as_ptr(),
                1,
                din as isize,
                T::one(),
                out.as_mut_ptr(),
                dout as isize,
                1,
            );
        }
        let out = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(Op::Linear { x, w, b }, out, (rows * din * dout) as u64))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum { x }, out, 0)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::from_usize(v.shape().numel()).unwrap());
        self.push(Op::Mean { x }, out, 0)
    }

    /// Fast normalized fusion: `sum_i relu(w_i) / (eps + sum_j relu(w_j)) * x_i`.
    /// `w` holds one learnable scalar per input.
    pub fn fusion(&mut self, xs: &[Var], w: Var, eps: T) -> Result<Var> {
        if xs.len() < 2 {
            return Err(Error::InvalidArgument("fusion needs at least two inputs".into()));
        }
        if self.shape(w).numel() != xs.len() {
            return Err(Error::Shape(format!(
                "fusion has {} weights for {} inputs",
                self.shape(w).numel(),
                xs.len()
            )));
        }
        let s0 = self.shape(xs[0]);
        if let Some(bad) = xs.iter().find(|&&x| self.shape(x) != s0) {
            return Err(Error::Shape(format!(
                "fusion inputs differ: {} vs {s0}",
                self.shape(*bad)
            )));
        }
        let coefs = fusion_coefficients(self.value(w).data(), eps);
        let mut out = vec![T::zero(); s0.numel()];
        for (&x, &c) in xs.iter().zip(&coefs) {
            for (o, &v) in out.iter_mut().zip(self.value(x).data()) {
                *o += c * v;
            }
        }
        let out = Tensor::from_vec(s0, out)?;
        Ok(self.push(
            Op::Fusion {
                xs: xs.to_vec(),
                w,
                eps,
            },
            out,
            0,
        ))
    }
}

/// Normalized non-negative fusion coefficients for raw weights `w`.
pub fn fusion_coefficients<T: Element>(w: &[T], eps: T) -> Vec<T> {
    let clamped: Vec<T> = w.iter().map(|&v| v.max(T::zero())).collect();
    let total = clamped.iter().copied().sum::<T>() + eps;
    clamped.into_iter().map(|v| v / total).collect()
}

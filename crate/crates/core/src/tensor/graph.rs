use std::rc::Rc;

use super::kernels;
use super::{Element, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Operation kind of a recorded node, used for graph inspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    BatchNorm,
    MaxPool,
    AvgPool,
    Resize,
    Sigmoid,
    Relu,
    Gelu,
    SoftmaxChannels,
    SoftmaxRows,
    Add,
    Mul,
    ScalarMul,
    SubFromScalar,
    Concat,
    Gather,
    Matmul,
    Linear,
    Sum,
    Mean,
    Fusion,
    WeightedFocal,
    WeightedIou,
    CrossEntropy,
}

impl OpKind {
    /// Nodes that produce attention maps (reverse attention or self-attention).
    pub fn is_attention(self) -> bool {
        matches!(self, OpKind::Sigmoid | OpKind::SoftmaxChannels | OpKind::SoftmaxRows)
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Resize {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    SoftmaxChannels {
        x: Var,
    },
    SoftmaxRows {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScalarMul {
        x: Var,
        s: T,
    },
    SubFromScalar {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    Gather {
        x: Var,
        index: Rc<Vec<usize>>,
    },
    Matmul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Fusion {
        xs: Vec<Var>,
        w: Var,
        eps: T,
    },
    WeightedFocal {
        logits: Var,
        /// Per-pixel derivative of the loss with respect to the logit.
        dlogit: Vec<T>,
    },
    WeightedIou {
        logits: Var,
        dlogit: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        dlogit: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::AvgPool { .. } => OpKind::AvgPool,
            Op::Resize { .. } => OpKind::Resize,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Relu { .. } => OpKind::Relu,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::SoftmaxChannels { .. } => OpKind::SoftmaxChannels,
            Op::SoftmaxRows { .. } => OpKind::SoftmaxRows,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::ScalarMul { .. } => OpKind::ScalarMul,
            Op::SubFromScalar { .. } => OpKind::SubFromScalar,
            Op::Concat { .. } => OpKind::Concat,
            Op::Gather { .. } => OpKind::Gather,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Fusion { .. } => OpKind::Fusion,
            Op::WeightedFocal { .. } => OpKind::WeightedFocal,
            Op::WeightedIou { .. } => OpKind::WeightedIou,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::MaxPool { x, .. }
            | Op::AvgPool { x, .. }
            | Op::Resize { x }
            | Op::Sigmoid { x }
            | Op::Relu { x }
            | Op::Gelu { x }
            | Op::SoftmaxChannels { x }
            | Op::SoftmaxRows { x }
            | Op::ScalarMul { x, .. }
            | Op::SubFromScalar { x }
            | Op::Gather { x, .. }
            | Op::Sum { x }
            | Op::Mean { x } => vec![*x],
            Op::Add { a, b } | Op::Mul { a, b } | Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::Concat { xs } => xs.clone(),
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Fusion { xs, w, .. } => {
                let mut v = xs.clone();
                v.push(*w);
                v
            }
            Op::WeightedFocal { logits, .. }
            | Op::WeightedIou { logits, .. }
            | Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) op: Op<T>,
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) macs: u64,
}

/// Append-only record of tensor operations; node ids are a topological order.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf. Leaves with `requires_grad` receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
            grad: None,
            macs: 0,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub(crate) fn push(&mut self, op: Op<T>, value: Tensor<T>, macs: u64) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
            macs,
        });
        Var(self.nodes.len() - 1)
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn count_kind(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Ids of all nodes that `root` depends on (including itself), ascending.
    pub fn ancestors(&self, root: Var) -> Vec<Var> {
        let mut seen = vec![false; root.0 + 1];
        seen[root.0] = true;
        for id in (0..=root.0).rev() {
            if seen[id] {
                for i in self.nodes[id].op.inputs() {
                    seen[i.0] = true;
                }
            }
        }
        (0..=root.0).filter(|&i| seen[i]).map(Var).collect()
    }

    /// Multiply-accumulate count of every recorded conv, linear and matmul.
    pub fn macs(&self) -> u64 {
        self.nodes.iter().map(|n| n.macs).sum()
    }

    pub fn macs_of(&self, kind: OpKind) -> u64 {
        self.nodes
            .iter()
            .filter(|n| n.op.kind() == kind)
            .map(|n| n.macs)
            .sum()
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if !shape.is_scalar() {
            return Err(Error::NonScalarLoss(shape.to_string()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (input, gi) in self.input_grads(id, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn input_grads(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.val(*x), self.val(*w), g, *stride, *pad);
                let mut v = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    v.push((*b, db));
                }
                v
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = out.shape();
                let gam = self.val(*gamma).data();
                let plane = s.plane();
                let m = T::from_usize(s.n * plane).unwrap();
                let mut dgamma = vec![T::zero(); s.c];
                let mut dbeta = vec![T::zero(); s.c];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let off = (n * s.c + c) * plane;
                        for i in off..off + plane {
                            dgamma[c] += g[i] * xhat[i];
                            dbeta[c] += g[i];
                        }
                    }
                }
                let mut dx = vec![T::zero(); s.numel()];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let off = (n * s.c + c) * plane;
                        for i in off..off + plane {
                            dx[i] = if *batch_stats {
                                gam[c] * inv_std[c] / m
                                    * (m * g[i] - dbeta[c] - xhat[i] * dgamma[c])
                            } else {
                                g[i] * gam[c] * inv_std[c]
                            };
                        }
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.val(*x).shape().numel()];
                for (o, &i) in argmax.iter().enumerate() {
                    dx[i] += g[o];
                }
                vec![(*x, dx)]
            }
            Op::AvgPool {
                x,
                kernel,
                stride,
                pad,
            } => vec![(
                *x,
                kernels::avg_pool2d_backward(self.val(*x).shape(), g, *kernel, *stride, *pad),
            )],
            Op::Resize { x } => {
                let s = out.shape();
                vec![(
                    *x,
                    kernels::bilinear_resize_backward(self.val(*x).shape(), s.h, s.w, g),
                )]
            }
            Op::Sigmoid { x } => vec![(
                *x,
                out.data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gi)| gi * y * (T::one() - y))
                    .collect(),
            )],
            Op::Relu { x } => vec![(
                *x,
                self.val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > T::zero() { gi } else { T::zero() })
                    .collect(),
            )],
            Op::Gelu { x } => vec![(
                *x,
                self.val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| gi * kernels::gelu_grad(v))
                    .collect(),
            )],
            Op::SoftmaxChannels { x } => {
                let s = out.shape();
                let plane = s.plane();
                let y = out.data();
                let mut dx = vec![T::zero(); s.numel()];
                for n in 0..s.n {
                    let base = n * s.c * plane;
                    for p in 0..plane {
                        let dot: T = (0..s.c)
                            .map(|c| g[base + c * plane + p] * y[base + c * plane + p])
                            .sum();
                        for c in 0..s.c {
                            let i = base + c * plane + p;
                            dx[i] = y[i] * (g[i] - dot);
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::SoftmaxRows { x } => {
                let w = out.shape().w;
                let mut dx = vec![T::zero(); g.len()];
                for ((yr, gr), dr) in out
                    .data()
                    .chunks(w)
                    .zip(g.chunks(w))
                    .zip(dx.chunks_mut(w))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::Add { a, b } => {
                let db = reduce_broadcast(g, out.shape(), self.val(*b).shape());
                vec![(*a, g.to_vec()), (*b, db)]
            }
            Op::Mul { a, b } => {
                let sa = out.shape();
                let av = self.val(*a).data();
                let bv = self.val(*b);
                let sb = bv.shape();
                let plane = sa.plane();
                let mut da = vec![T::zero(); g.len()];
                let mut prod = vec![T::zero(); g.len()];
                for i in 0..g.len() {
                    let bi = broadcast_index(i, sa, sb, plane);
                    da[i] = g[i] * bv.data()[bi];
                    prod[i] = g[i] * av[i];
                }
                let db = reduce_broadcast(&prod, sa, sb);
                vec![(*a, da), (*b, db)]
            }
            Op::ScalarMul { x, s } => vec![(*x, g.iter().map(|&v| v * *s).collect())],
            Op::SubFromScalar { x } => vec![(*x, g.iter().map(|&v| -v).collect())],
            Op::Concat { xs } => {
                let s = out.shape();
                let plane = s.plane();
                let mut offset = 0;
                let mut res = Vec::with_capacity(xs.len());
                for &xv in xs {
                    let c = self.val(xv).shape().c;
                    let mut d = Vec::with_capacity(s.n * c * plane);
                    for n in 0..s.n {
                        let start = (n * s.c + offset) * plane;
                        d.extend_from_slice(&g[start..start + c * plane]);
                    }
                    offset += c;
                    res.push((xv, d));
                }
                res
            }
            Op::Gather { x, index } => {
                let mut dx = vec![T::zero(); self.val(*x).shape().numel()];
                for (o, &i) in index.iter().enumerate() {
                    dx[i] += g[o];
                }
                vec![(*x, dx)]
            }
            Op::Matmul { a, b, trans_b } => {
                let (da, db) = kernels::matmul_backward(self.val(*a), self.val(*b), *trans_b, g);
                vec![(*a, da), (*b, db)]
            }
            Op::Linear { x, w, b } => {
                let xs = self.val(*x);
                let wv = self.val(*w);
                let (dout, din) = (wv.shape().h, wv.shape().w);
                let rows = xs.shape().numel() / din;
                let mut dx = vec![T::zero(); xs.shape().numel()];
                let mut dw = vec![T::zero(); wv.shape().numel()];
                let mut db = vec![T::zero(); dout];
                for row in g.chunks(dout) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                // SAFETY: contiguous row-major buffers with the stated extents.
                unsafe {
                    // dX[rows, din] = G[rows, dout] * W[dout, din]
                    T::gemm(
                        rows,
                        dout,
                        din,
                        T::one(),
                        g.as_ptr(),
                        dout as isize,
                        1,
                        wv.data().as_ptr(),
                        din as isize,
                        1,
                        T::zero(),
                        dx.as_mut_ptr(),
                        din as isize,
                        1,
                    );
                    // dW[dout, din] = G^T[dout, rows] * X[rows, din]
                    T::gemm(
                        dout,
                        rows,
                        din,
                        T::one(),
                        g.as_ptr(),
                        1,
                        dout as isize,
                        xs.data().as_ptr(),
                        din as isize,
                        1,
                        T::zero(),
                        dw.as_mut_ptr(),
                        din as isize,
                        1,
                    );
                }
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::Sum { x } => vec![(*x, vec![g[0]; self.val(*x).shape().numel()])],
            Op::Mean { x } => {
                let n = self.val(*x).shape().numel();
                let v = g[0] / T::from_usize(n).unwrap();
                vec![(*x, vec![v; n])]
            }
            Op::Fusion { xs, w, eps } => {
                let wv = self.val(*w).data();
                let clamped: Vec<T> = wv.iter().map(|&v| v.max(T::zero())).collect();
                let total: T = clamped.iter().copied().sum::<T>() + *eps;
                let mut res = Vec::with_capacity(xs.len() + 1);
                // dOut/dw_j = relu'(w_j) * (x_j - out) / total
                let mut dw = vec![T::zero(); wv.len()];
                for (j, &xv) in xs.iter().enumerate() {
                    let coef = clamped[j] / total;
                    let xd = self.val(xv).data();
                    res.push((xv, g.iter().map(|&gi| gi * coef).collect()));
                    if wv[j] > T::zero() {
                        dw[j] = g
                            .iter()
                            .zip(xd)
                            .zip(out.data())
                            .map(|((&gi, &xi), &oi)| gi * (xi - oi))
                            .sum::<T>()
                            / total;
                    }
                }
                res.push((*w, dw));
                res
            }
            Op::WeightedFocal { logits, dlogit }
            | Op::WeightedIou { logits, dlogit }
            | Op::CrossEntropy { logits, dlogit } => {
                vec![(*logits, dlogit.iter().map(|&d| d * g[0]).collect())]
            }
        }
    }
}

/// Index into `b` for output element `i` of shape `sa`, where `b` is either
/// the same shape or a single-channel map broadcast over channels.
pub(crate) fn broadcast_index(i: usize, sa: Shape, sb: Shape, plane: usize) -> usize {
    if sb == sa {
        i
    } else {
        let n = i / (sa.c * plane);
        n * plane + i % plane
    }
}

fn reduce_broadcast<T: Element>(g: &[T], sa: Shape, sb: Shape) -> Vec<T> {
    if sa == sb {
        return g.to_vec();
    }
    let plane = sa.plane();
    let mut out = vec![T::zero(); sb.numel()];
    for (i, &v) in g.iter().enumerate() {
        out[broadcast_index(i, sa, sb, plane)] += v;
    }
    out
}

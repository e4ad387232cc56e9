//! Segmentation losses and deep-supervision aggregation.
//!
//! The binary loss is a weighted focal term plus a weighted soft IoU term,
//! both driven by a hard-pixel weight map derived from the ground truth.
//! Multi-class outputs use categorical cross-entropy. Each loss is a single
//! fused graph node whose logit derivative is computed analytically.

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderOutputs;
use crate::error::{Error, Result};
use crate::tensor::graph::Op;
use crate::tensor::{kernels, Element, Graph, Shape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub weight_kernel: usize,
    pub weight_scale: f64,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 2.0,
            alpha: 0.25,
            weight_kernel: 31,
            weight_scale: 5.0,
            eps: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("focal gamma {} must be >= 0", self.gamma)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("focal alpha {} outside (0, 1)", self.alpha)));
        }
        if self.weight_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "weight kernel {} must be odd",
                self.weight_kernel
            )));
        }
        if !(self.eps > 0.0) || !(self.weight_scale >= 0.0) {
            return Err(Error::Config("eps must be positive and weight scale non-negative".into()));
        }
        Ok(())
    }
}

fn check_binary<T: Element>(gt: &Tensor<T>) -> Result<()> {
    if gt.shape().c != 1 {
        return Err(Error::Shape(format!("binary mask must have one channel, got {}", gt.shape())));
    }
    if let Some(v) = gt.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::InvalidArgument(format!(
            "mask value {} is not binary",
            v.to_f64c()
        )));
    }
    Ok(())
}

/// `w = 1 + scale * |avg_pool(gt) - gt|` with a stride-1, same-size window.
pub fn hard_pixel_weights<T: Element>(gt: &Tensor<T>, kernel: usize, scale: f64) -> Result<Tensor<T>> {
    check_binary(gt)?;
    if kernel.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("kernel {kernel} must be odd")));
    }
    let pooled = kernels::avg_pool2d(gt, kernel, 1, (kernel - 1) / 2)?;
    let data = pooled
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&m, &g)| T::from_f64c(1.0 + scale * (m.to_f64c() - g.to_f64c()).abs()))
        .collect();
    Tensor::from_vec(gt.shape(), data)
}

fn check_pair<T: Element>(g: &Graph<T>, logits: Var, gt: &Tensor<T>, w: &Tensor<T>) -> Result<Shape> {
    let shape = g.shape(logits);
    if shape != gt.shape() || shape != w.shape() {
        return Err(Error::Shape(format!(
            "logits {shape}, mask {}, weights {} must match",
            gt.shape(),
            w.shape()
        )));
    }
    if shape.c != 1 {
        return Err(Error::Shape(format!("binary loss expects one channel, got {shape}")));
    }
    Ok(shape)
}

fn sigmoid64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Weighted focal loss, normalized by the weight mass of each image and
/// averaged over the batch.
pub fn weighted_focal_loss<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    gt: &Tensor<T>,
    w: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Var> {
    let shape = check_pair(g, logits, gt, w)?;
    let (gamma, alpha, eps) = (cfg.gamma, cfg.alpha, cfg.eps);
    let plane = shape.plane();
    let z = g.value(logits).data();
    let mut dlogit = vec![T::zero(); z.len()];
    let mut total = 0.0;
    for n in 0..shape.n {
        let r = n * plane..(n + 1) * plane;
        let mass: f64 = w.data()[r.clone()].iter().map(|v| v.to_f64c()).sum();
        if mass <= 0.0 {
            return Err(Error::InvalidArgument("weight map has no positive mass".into()));
        }
        let mut acc = 0.0;
        for i in r {
            let p = sigmoid64(z[i].to_f64c());
            let y = gt.data()[i].to_f64c();
            let wi = w.data()[i].to_f64c();
            let pt = p * y + (1.0 - p) * (1.0 - y);
            let at = alpha * y + (1.0 - alpha) * (1.0 - y);
            let q = 1.0 - pt;
            let log_pt = (pt + eps).ln();
            acc -= wi * at * q.powf(gamma) * log_pt;
            let dmod = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) };
            let df_dpt = at * (q.powf(gamma) / (pt + eps) - dmod * log_pt);
            let dpt_dz = (2.0 * y - 1.0) * p * (1.0 - p);
            dlogit[i] = T::from_f64c(-wi * df_dpt * dpt_dz / mass / shape.n as f64);
        }
        total += acc / mass;
    }
    let value = Tensor::scalar(T::from_f64c(total / shape.n as f64));
    Ok(g.push(Op::WeightedFocal { logits, dlogit }, value, 0))
}

/// Weighted soft IoU loss per image, averaged over the batch.
///
/// Intersection and union are both smoothed by `eps` times the weight mass,
/// so the loss is zero at a perfect hard prediction and invariant to scaling
/// `w`.
pub fn weighted_iou_loss<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    gt: &Tensor<T>,
    w: &Tensor<T>,
    eps: f64,
) -> Result<Var> {
    let shape = check_pair(g, logits, gt, w)?;
    let plane = shape.plane();
    let z = g.value(logits).data();
    let mut dlogit = vec![T::zero(); z.len()];
    let mut total = 0.0;
    for n in 0..shape.n {
        let r = n * plane..(n + 1) * plane;
        let probs: Vec<f64> = z[r.clone()].iter().map(|v| sigmoid64(v.to_f64c())).collect();
        let (mut inter, mut union, mut mass) = (0.0, 0.0, 0.0);
        for (k, i) in r.clone().enumerate() {
            let (p, y, wi) = (probs[k], gt.data()[i].to_f64c(), w.data()[i].to_f64c());
            inter += wi * p * y;
            union += wi * (p + y - p * y);
            mass += wi;
        }
        let num = inter + eps * mass;
        let den = union + eps * mass;
        total += 1.0 - num / den;
        for (k, i) in r.enumerate() {
            let (p, y, wi) = (probs[k], gt.data()[i].to_f64c(), w.data()[i].to_f64c());
            let dl_dp = -(wi * y * den - num * wi * (1.0 - y)) / (den * den);
            dlogit[i] = T::from_f64c(dl_dp * p * (1.0 - p) / shape.n as f64);
        }
    }
    let value = Tensor::scalar(T::from_f64c(total / shape.n as f64));
    Ok(g.push(Op::WeightedIou { logits, dlogit }, value, 0))
}

/// Mean over pixels of `-log softmax(logits)[label]`. `labels` holds one
/// entry per pixel in `(n, y, x)` order.
pub fn categorical_ce<T: Element>(g: &mut Graph<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    let shape = g.shape(logits);
    let plane = shape.plane();
    if labels.len() != shape.n * plane {
        return Err(Error::Shape(format!(
            "{} labels for logits {shape}",
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= shape.c) {
        return Err(Error::LabelOutOfRange { label: l, classes: shape.c });
    }
    let z = g.value(logits).data();
    let count = labels.len() as f64;
    let mut dlogit = vec![T::zero(); z.len()];
    let mut total = 0.0;
    let mut row = vec![0.0; shape.c];
    for n in 0..shape.n {
        for px in 0..plane {
            let at = |c: usize| n * shape.c * plane + c * plane + px;
            for (c, r) in row.iter_mut().enumerate() {
                *r = z[at(c)].to_f64c();
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let label = labels[n * plane + px] as usize;
            total += lse - row[label];
            for (c, &r) in row.iter().enumerate() {
                let onehot = if c == label { 1.0 } else { 0.0 };
                dlogit[at(c)] = T::from_f64c(((r - lse).exp() - onehot) / count);
            }
        }
    }
    let value = Tensor::scalar(T::from_f64c(total / count));
    Ok(g.push(Op::CrossEntropy { logits, dlogit }, value, 0))
}

/// Ground truth for one batch at the original image size.
#[derive(Debug, Clone)]
pub enum Target<T> {
    /// Binary mask `(N,1,H,W)` and its hard-pixel weight map.
    Binary { mask: Tensor<T>, weights: Tensor<T> },
    /// Label map in `(n, y, x)` order.
    Classes { labels: Vec<u8>, n: usize, h: usize, w: usize },
}

impl<T: Element> Target<T> {
    pub fn binary(mask: Tensor<T>, cfg: &LossConfig) -> Result<Self> {
        let weights = hard_pixel_weights(&mask, cfg.weight_kernel, cfg.weight_scale)?;
        Ok(Target::Binary { mask, weights })
    }

    pub fn size(&self) -> (usize, usize, usize) {
        match self {
            Target::Binary { mask, .. } => {
                let s = mask.shape();
                (s.n, s.h, s.w)
            }
            Target::Classes { n, h, w, .. } => (*n, *h, *w),
        }
    }
}

/// Loss of one output already at target size.
pub fn output_loss<T: Element>(g: &mut Graph<T>, logits: Var, target: &Target<T>, cfg: &LossConfig) -> Result<Var> {
    match target {
        Target::Binary { mask, weights } => {
            let focal = weighted_focal_loss(g, logits, mask, weights, cfg)?;
            let iou = weighted_iou_loss(g, logits, mask, weights, cfg.eps)?;
            g.add(focal, iou)
        }
        Target::Classes { labels, .. } => categorical_ce(g, logits, labels),
    }
}

#[derive(Debug, Clone)]
pub struct SupervisionLoss {
    pub total: Var,
    /// One loss node per output, in input order.
    pub terms: Vec<Var>,
}

/// Resizes every output to the target size and sums their losses.
pub fn deep_supervision_loss<T: Element>(
    g: &mut Graph<T>,
    outputs: &[Var],
    target: &Target<T>,
    cfg: &LossConfig,
) -> Result<SupervisionLoss> {
    if outputs.is_empty() {
        return Err(Error::InvalidArgument("deep supervision needs at least one output".into()));
    }
    let (n, h, w) = target.size();
    let mut terms = Vec::with_capacity(outputs.len());
    for &out in outputs {
        if g.shape(out).n != n {
            return Err(Error::Shape(format!(
                "output batch {} differs from target batch {n}",
                g.shape(out).n
            )));
        }
        let resized = g.resize(out, h, w)?;
        terms.push(output_loss(g, resized, target, cfg)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(SupervisionLoss { total, terms })
}

/// Supervision outputs (coarse to fine) followed by the final prediction.
pub fn supervised_outputs(out: &DecoderOutputs) -> Vec<Var> {
    let mut v: Vec<Var> = out.supervision.iter().map(|&(_, x)| x).collect();
    v.push(out.final_logits);
    v
}

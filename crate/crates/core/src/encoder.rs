//! Hierarchical attention encoder.
//!
//! Five stride-2 stages built from overlapped 3x3 patch embeddings. Stages
//! listed in `attn_stages` add one transformer block (spatial-reduction
//! self-attention plus a GELU feed-forward), the others are conv-only. Two
//! coarser levels are derived from the last stage by a 1x1 conv, batch norm
//! and max pooling, and stages 3..5 are compressed to the decoder width.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Act, BatchNorm2d, Conv2d, ConvBn, LayoutBuilder, Linear, Session};
use crate::tensor::{Element, Var};

pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Channel count of stages 1..=5.
    pub stage_dims: [usize; 5],
    /// 1-based indices of stages that use self-attention.
    pub attn_stages: Vec<usize>,
    /// Head count per attention stage, in `attn_stages` order.
    pub heads: Vec<usize>,
    /// Key/value spatial reduction per attention stage.
    pub sr_ratios: Vec<usize>,
    /// Decoder width `C` shared by every pyramid level.
    pub decoder_width: usize,
}

impl EncoderConfig {
    pub fn tiny() -> Self {
        EncoderConfig {
            stage_dims: [8, 16, 32, 64, 96],
            attn_stages: vec![3, 4, 5],
            heads: vec![1, 2, 2],
            sr_ratios: vec![2, 2, 1],
            decoder_width: 32,
        }
    }

    /// Wider stages and `C = 224`; used for complexity accounting.
    pub fn full_size() -> Self {
        EncoderConfig {
            stage_dims: [32, 64, 128, 320, 512],
            attn_stages: vec![3, 4, 5],
            heads: vec![2, 5, 8],
            sr_ratios: vec![4, 2, 1],
            decoder_width: 224,
        }
    }

    /// Smallest input side accepted by the encoder.
    pub const MIN_INPUT: usize = 32;

    pub fn validate(&self) -> Result<()> {
        if self.stage_dims.contains(&0) || self.decoder_width == 0 {
            return Err(Error::Config("stage dims and decoder width must be positive".into()));
        }
        if self.heads.len() != self.attn_stages.len() || self.sr_ratios.len() != self.attn_stages.len() {
            return Err(Error::Config(
                "heads and sr_ratios need one entry per attention stage".into(),
            ));
        }
        for (i, &stage) in self.attn_stages.iter().enumerate() {
            if !(1..=5).contains(&stage) {
                return Err(Error::Config(format!("attention stage {stage} outside 1..=5")));
            }
            let (heads, sr) = (self.heads[i], self.sr_ratios[i]);
            if heads == 0 || !self.stage_dims[stage - 1].is_multiple_of(heads) {
                return Err(Error::Config(format!(
                    "stage {stage}: dim {} not divisible by {heads} heads",
                    self.stage_dims[stage - 1]
                )));
            }
            let min_side = Self::MIN_INPUT >> stage;
            if sr == 0 || min_side % sr != 0 {
                return Err(Error::Config(format!(
                    "stage {stage}: sr ratio {sr} does not divide side {min_side} at the minimum input"
                )));
            }
        }
        Ok(())
    }
}

/// Spatial-reduction multi-head self-attention with a residual connection.
#[derive(Debug, Clone)]
pub struct Attention {
    pub heads: usize,
    pub sr_ratio: usize,
    pub dim: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    reduce: Option<(Conv2d, BatchNorm2d)>,
}

impl Attention {
    pub fn declare(b: &mut LayoutBuilder, name: &str, dim: usize, heads: usize, sr_ratio: usize) -> Self {
        b.scoped(name, |b| Attention {
            heads,
            sr_ratio,
            dim,
            q: Linear::declare(b, "q", dim, dim),
            k: Linear::declare(b, "k", dim, dim),
            v: Linear::declare(b, "v", dim, dim),
            proj: Linear::declare(b, "proj", dim, dim),
            reduce: (sr_ratio > 1).then(|| {
                (
                    Conv2d::declare(b, "sr", dim, dim, sr_ratio, sr_ratio, 0),
                    BatchNorm2d::declare(b, "sr_bn", dim),
                )
            }),
        })
    }

    /// Returns the block output (same shape as `x`) and the attention matrix
    /// of shape `(N, heads, H*W, H*W / sr^2)`.
    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<(Var, Var)> {
        let shape = s.graph.shape(x);
        if shape.c != self.dim || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Shape(format!(
                "attention over {shape} with dim {} and {} heads",
                self.dim, self.heads
            )));
        }
        if !shape.h.is_multiple_of(self.sr_ratio) || !shape.w.is_multiple_of(self.sr_ratio) {
            return Err(Error::Shape(format!(
                "spatial size {}x{} not divisible by sr ratio {}",
                shape.h, shape.w, self.sr_ratio
            )));
        }
        let tokens = s.graph.to_tokens(x)?;
        let kv_src = match &self.reduce {
            Some((conv, bn)) => {
                let r = conv.forward(s, x)?;
                let r = bn.forward(s, r)?;
                s.graph.to_tokens(r)?
            }
            None => tokens,
        };
        let q = self.q.forward(s, tokens)?;
        let k = self.k.forward(s, kv_src)?;
        let v = self.v.forward(s, kv_src)?;
        let q = s.graph.split_heads(q, self.heads)?;
        let k = s.graph.split_heads(k, self.heads)?;
        let v = s.graph.split_heads(v, self.heads)?;
        let scores = s.graph.matmul(q, k, true)?;
        let scale = T::from_f64c(1.0 / ((self.dim / self.heads) as f64).sqrt());
        let scores = s.graph.scalar_mul(scores, scale);
        let attn = s.graph.softmax_rows(scores);
        let ctx = s.graph.matmul(attn, v, false)?;
        let ctx = s.graph.merge_heads(ctx)?;
        let out = self.proj.forward(s, ctx)?;
        let out = s.graph.add(tokens, out)?;
        let out = s.graph.from_tokens(out, shape.h, shape.w)?;
        Ok((out, attn))
    }
}

/// Two-layer GELU feed-forward over tokens, with residual.
#[derive(Debug, Clone)]
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn declare(b: &mut LayoutBuilder, name: &str, dim: usize) -> Self {
        b.scoped(name, |b| FeedForward {
            fc1: Linear::declare(b, "fc1", dim, dim * MLP_RATIO),
            fc2: Linear::declare(b, "fc2", dim * MLP_RATIO, dim),
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x);
        let t = s.graph.to_tokens(x)?;
        let h = self.fc1.forward(s, t)?;
        let h = s.graph.gelu(h);
        let h = self.fc2.forward(s, h)?;
        let out = s.graph.add(t, h)?;
        s.graph.from_tokens(out, shape.h, shape.w)
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub index: usize,
    /// Overlapped patch embedding: 3x3 stride-2 conv + batch norm.
    pub embed: ConvBn,
    pub block: Option<(Attention, FeedForward)>,
}

impl Stage {
    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<(Var, Option<Var>)> {
        let xs = s.graph.shape(x);
        if xs.h < 2 || xs.w < 2 {
            return Err(Error::Shape(format!("patch embed needs at least 2x2 input, got {xs}")));
        }
        let y = self.embed.forward(s, x)?;
        match &self.block {
            Some((attn, ffn)) => {
                let (y, a) = attn.forward(s, y)?;
                Ok((ffn.forward(s, y)?, Some(a)))
            }
            None => Ok((s.graph.relu(y), None)),
        }
    }
}

/// Stage outputs `P1..P5` (index 0 holds `P1`).
#[derive(Debug, Clone)]
pub struct EncoderStages {
    pub stages: [Var; 5],
    /// Attention matrices produced by attention stages, in stage order.
    pub attention: Vec<Var>,
}

impl EncoderStages {
    pub fn level(&self, i: usize) -> Var {
        self.stages[i - 1]
    }
}

/// Decoder inputs `P3..P7`, all with `C` channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidFeatures {
    pub levels: [Var; 5],
}

impl PyramidFeatures {
    pub const FIRST: usize = 3;
    pub const LAST: usize = 7;

    pub fn new(levels: [Var; 5]) -> Self {
        PyramidFeatures { levels }
    }

    pub fn level(&self, i: usize) -> Var {
        assert!((Self::FIRST..=Self::LAST).contains(&i), "pyramid level {i} outside 3..=7");
        self.levels[i - Self::FIRST]
    }

    pub fn set(&mut self, i: usize, v: Var) {
        self.levels[i - Self::FIRST] = v;
    }
}

/// Pyramid side length at level `i` for a square input of side `input`.
pub fn level_size(input: usize, level: usize) -> usize {
    let mut s = input;
    for _ in 0..level.min(5) {
        s /= 2;
    }
    for _ in 5..level {
        s = s.div_ceil(2);
    }
    s
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stages: Vec<Stage>,
    /// 1x1 conv to `C` + batch norm producing `P6` before pooling.
    pub p6_proj: ConvBn,
    /// Independent 3x3 convs compressing `P3..P5` to `C` channels.
    pub compress: [Conv2d; 3],
}

impl Encoder {
    pub fn declare(b: &mut LayoutBuilder, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let c = config.decoder_width;
        b.scoped("encoder", |b| {
            let mut in_c = 3;
            let mut stages = Vec::with_capacity(5);
            for (i, &dim) in config.stage_dims.iter().enumerate() {
                let index = i + 1;
                let stage = b.scoped(format!("stage{index}"), |b| {
                    let embed = ConvBn::declare(b, "embed", in_c, dim, 3, 2, 1, Act::None);
                    let block = config.attn_stages.iter().position(|&s| s == index).map(|k| {
                        (
                            Attention::declare(b, "attn", dim, config.heads[k], config.sr_ratios[k]),
                            FeedForward::declare(b, "ffn", dim),
                        )
                    });
                    Stage { index, embed, block }
                });
                stages.push(stage);
                in_c = dim;
            }
            let p6_proj = ConvBn::declare(b, "p6", config.stage_dims[4], c, 1, 1, 0, Act::None);
            let compress = [3usize, 4, 5].map(|lvl| {
                Conv2d::declare(b, &format!("compress{lvl}"), config.stage_dims[lvl - 1], c, 3, 1, 1)
            });
            Ok(Encoder {
                config: config.clone(),
                stages,
                p6_proj,
                compress,
            })
        })
    }

    /// Runs the five stages on an `N x 3 x S x S` image.
    pub fn forward_stages<T: Element>(&self, s: &mut Session<'_, T>, image: Var) -> Result<EncoderStages> {
        let shape = s.graph.shape(image);
        if shape.c != 3 {
            return Err(Error::Shape(format!("encoder expects 3 input channels, got {shape}")));
        }
        if !shape.h.is_multiple_of(32) || !shape.w.is_multiple_of(32) {
            return Err(Error::Shape(format!(
                "input {}x{} is not divisible by 32",
                shape.h, shape.w
            )));
        }
        let mut x = image;
        let mut out = Vec::with_capacity(5);
        let mut attention = Vec::new();
        for stage in &self.stages {
            let (y, a) = stage.forward(s, x)?;
            attention.extend(a);
            out.push(y);
            x = y;
        }
        Ok(EncoderStages {
            stages: out.try_into().expect("five stages"),
            attention,
        })
    }

    /// `P6 = maxpool(bn(conv1x1(P5)))`, `P7 = maxpool(P6)`; 3x3 windows, stride 2, pad 1.
    pub fn derive_p6_p7<T: Element>(&self, s: &mut Session<'_, T>, p5: Var) -> Result<(Var, Var)> {
        let y = self.p6_proj.forward(s, p5)?;
        let p6 = s.graph.max_pool2d(y, 3, 2, 1)?;
        let p7 = s.graph.max_pool2d(p6, 3, 2, 1)?;
        Ok((p6, p7))
    }

    pub fn compress_levels<T: Element>(&self, s: &mut Session<'_, T>, raw: [Var; 3]) -> Result<[Var; 3]> {
        let mut out = raw;
        for (slot, conv) in out.iter_mut().zip(&self.compress) {
            *slot = conv.forward(s, *slot)?;
        }
        Ok(out)
    }

    /// Full pyramid `P3..P7` at width `C`.
    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, image: Var) -> Result<(PyramidFeatures, EncoderStages)> {
        let stages = self.forward_stages(s, image)?;
        let (p6, p7) = self.derive_p6_p7(s, stages.level(5))?;
        let [p3, p4, p5] = self.compress_levels(s, [stages.level(3), stages.level(4), stages.level(5)])?;
        Ok((PyramidFeatures::new([p3, p4, p5, p6, p7]), stages))
    }

    /// Analytic parameter count of the three compressors.
    pub fn compress_param_count(&self) -> usize {
        self.compress.iter().map(Conv2d::param_count).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_sizes_follow_floor_chain() {
        assert_eq!(
            (3..=7).map(|l| level_size(128, l)).collect::<Vec<_>>(),
            [16, 8, 4, 2, 1]
        );
        assert_eq!(
            (3..=7).map(|l| level_size(96, l)).collect::<Vec<_>>(),
            [12, 6, 3, 2, 1]
        );
        assert_eq!(
            (3..=7).map(|l| level_size(384, l)).collect::<Vec<_>>(),
            [48, 24, 12, 6, 3]
        );
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::tiny().validate().is_ok());
        assert!(EncoderConfig::full_size().validate().is_ok());
        let mut bad = EncoderConfig::tiny();
        bad.heads = vec![3, 2, 2];
        assert!(bad.validate().is_err());
        let mut bad = EncoderConfig::tiny();
        bad.sr_ratios = vec![8, 2, 1];
        assert!(bad.validate().is_err());
    }
}

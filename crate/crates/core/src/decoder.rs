//! Reverse-attention bidirectional feature-pyramid decoder.
//!
//! One block is a coarse-to-fine refinement pass (fusion with the upsampled
//! coarser output, then reverse attention at levels 6..3) followed by a
//! fine-to-coarse aggregation pass (fusion with the max-pooled finer output,
//! then a bottleneck conv at levels 4..7). Blocks are repeated `D` times with
//! independent parameters, and a final refinement pass produces the
//! multi-scale predictions.

use serde::{Deserialize, Serialize};

use crate::encoder::PyramidFeatures;
use crate::error::{Error, Result};
use crate::nn::{Act, Conv2d, ConvBn, FusionWeights, LayoutBuilder, Session};
use crate::tensor::{Element, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RaVariant {
    Sigmoid,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub width: usize,
    pub repeats: usize,
    pub n_classes: usize,
    pub ra_variant: RaVariant,
    pub use_bottleneck: bool,
    /// `false` gives the plain weighted-BiFPN baseline without reverse attention.
    pub use_ra: bool,
    pub fusion_eps: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            width: 224,
            repeats: 4,
            n_classes: 1,
            ra_variant: RaVariant::Sigmoid,
            use_bottleneck: true,
            use_ra: true,
            fusion_eps: 1e-4,
        }
    }
}

impl DecoderConfig {
    /// Output channels of every prediction: 1 for binary, `n_classes` otherwise.
    pub fn n_out(&self) -> usize {
        if self.n_classes == 1 {
            1
        } else {
            self.n_classes
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("decoder repeats must be at least 1".into()));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be at least 1".into()));
        }
        if self.ra_variant == RaVariant::Softmax && self.n_classes < 2 {
            return Err(Error::Config("softmax reverse attention needs n_classes >= 2".into()));
        }
        if self.width == 0 || !self.width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "decoder width {} must be positive and even",
                self.width
            )));
        }
        if !(self.fusion_eps > 0.0) {
            return Err(Error::Config("fusion_eps must be positive".into()));
        }
        Ok(())
    }
}

/// 1x1 reduce to `C/2`, 3x3 at `C/2`, 1x1 expand to `C`; batch norm after
/// each conv, ReLU after the first two.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub reduce: ConvBn,
    pub mid: ConvBn,
    pub expand: ConvBn,
}

impl Bottleneck {
    pub fn declare(b: &mut LayoutBuilder, name: &str, in_c: usize, width: usize) -> Result<Self> {
        if !width.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("bottleneck width {width} is odd")));
        }
        let half = width / 2;
        Ok(b.scoped(name, |b| Bottleneck {
            reduce: ConvBn::declare(b, "reduce", in_c, half, 1, 1, 0, Act::Relu),
            mid: ConvBn::declare(b, "mid", half, half, 3, 1, 1, Act::Relu),
            expand: ConvBn::declare(b, "expand", half, width, 1, 1, 0, Act::None),
        }))
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.reduce.forward(s, x)?;
        let y = self.mid.forward(s, y)?;
        self.expand.forward(s, y)
    }

    pub fn conv_param_count(&self) -> usize {
        self.reduce.conv.param_count() + self.mid.conv.param_count() + self.expand.conv.param_count()
    }
}

/// Conv stage used wherever the decoder transforms features: either the
/// bottleneck or a single plain 3x3 conv + BN + ReLU.
#[derive(Debug, Clone)]
pub enum ConvBlock {
    Bottleneck(Bottleneck),
    Plain(ConvBn),
}

impl ConvBlock {
    pub fn declare(b: &mut LayoutBuilder, name: &str, in_c: usize, width: usize, bottleneck: bool) -> Result<Self> {
        if bottleneck {
            Ok(ConvBlock::Bottleneck(Bottleneck::declare(b, name, in_c, width)?))
        } else {
            Ok(ConvBlock::Plain(ConvBn::declare(
                b,
                name,
                in_c,
                width,
                3,
                1,
                1,
                Act::Relu,
            )))
        }
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        match self {
            ConvBlock::Bottleneck(b) => b.forward(s, x),
            ConvBlock::Plain(c) => c.forward(s, x),
        }
    }

    pub fn conv_param_count(&self) -> usize {
        match self {
            ConvBlock::Bottleneck(b) => b.conv_param_count(),
            ConvBlock::Plain(c) => c.conv.param_count(),
        }
    }
}

/// Intermediate tensors of one reverse-attention application.
#[derive(Debug, Clone)]
pub struct RaTrace {
    pub logits: Var,
    /// Attention map `A` (sigmoid or channel softmax of the logits).
    pub attention: Var,
    /// Gated features before the conv block: `x * (1 - A_k)` for each class,
    /// concatenated along channels.
    pub gated: Var,
    pub output: Var,
}

/// Reverse attention over a `C`-channel map.
///
/// The logit conv predicts `n_out` maps. Each attention map is reversed
/// (`1 - A_k`), multiplies the input, and the `n_out * C` channel stack is
/// projected back to `C` by the conv block. With one output this is the
/// binary sigmoid module; with `n` outputs and softmax it is the multi-class
/// module.
#[derive(Debug, Clone)]
pub struct ReverseAttention {
    pub variant: RaVariant,
    pub n_out: usize,
    pub logit_conv: Conv2d,
    pub body: ConvBlock,
}

impl ReverseAttention {
    pub fn declare(b: &mut LayoutBuilder, name: &str, cfg: &DecoderConfig) -> Result<Self> {
        let n_out = cfg.n_out();
        if cfg.ra_variant == RaVariant::Softmax && n_out < 2 {
            return Err(Error::InvalidArgument("softmax reverse attention needs n >= 2".into()));
        }
        b.scoped(name, |b| {
            Ok(ReverseAttention {
                variant: cfg.ra_variant,
                n_out,
                logit_conv: Conv2d::declare(b, "logit", cfg.width, n_out, 3, 1, 1),
                body: ConvBlock::declare(b, "body", n_out * cfg.width, cfg.width, cfg.use_bottleneck)?,
            })
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<RaTrace> {
        let logits = self.logit_conv.forward(s, x)?;
        self.forward_with_logits(s, x, logits)
    }

    /// Applies the gating and conv block using externally supplied logits.
    pub fn forward_with_logits<T: Element>(&self, s: &mut Session<'_, T>, x: Var, logits: Var) -> Result<RaTrace> {
        let (attention, gated) = reverse_gate(&mut s.graph, x, logits, self.variant)?;
        let output = self.body.forward(s, gated)?;
        Ok(RaTrace {
            logits,
            attention,
            gated,
            output,
        })
    }
}

/// Computes the attention map from `logits` and returns it together with
/// `concat_k(x * (1 - A_k))`.
pub fn reverse_gate<T: Element>(
    g: &mut crate::tensor::Graph<T>,
    x: Var,
    logits: Var,
    variant: RaVariant,
) -> Result<(Var, Var)> {
    let n = g.shape(logits).c;
    let attention = match variant {
        RaVariant::Sigmoid => g.sigmoid(logits),
        RaVariant::Softmax => {
            if n < 2 {
                return Err(Error::InvalidArgument(format!(
                    "softmax reverse attention needs at least 2 classes, got {n}"
                )));
            }
            g.softmax_channels(logits)
        }
    };
    let reversed = g.sub_from_scalar(T::one(), attention);
    if n == 1 {
        let gated = g.mul(x, reversed)?;
        return Ok((attention, gated));
    }
    let mut maps = Vec::with_capacity(n);
    for k in 0..n {
        let rk = g.slice_channels(reversed, k, 1)?;
        maps.push(g.mul(x, rk)?);
    }
    let gated = g.concat_channels(&maps)?;
    Ok((attention, gated))
}

#[derive(Debug, Clone)]
pub enum Refiner {
    Attention(ReverseAttention),
    /// Ablation: conv block only, no attention and no logits.
    Plain(ConvBlock),
}

/// Coarse-to-fine pass over levels 6..3.
#[derive(Debug, Clone)]
pub struct RefinementPass {
    /// Indexed by level - 3 (levels 3..=6).
    pub fuse: Vec<FusionWeights>,
    pub refine: Vec<Refiner>,
}

#[derive(Debug, Clone)]
pub struct RefinementOutput {
    pub levels: PyramidFeatures,
    /// `(level, logits)` for levels 6, 5, 4, 3 when reverse attention is on.
    pub logits: Vec<(usize, Var)>,
    pub traces: Vec<(usize, RaTrace)>,
}

impl RefinementPass {
    pub fn declare(b: &mut LayoutBuilder, name: &str, cfg: &DecoderConfig) -> Result<Self> {
        b.scoped(name, |b| {
            let mut fuse = Vec::new();
            let mut refine = Vec::new();
            for level in 3..=6 {
                fuse.push(FusionWeights::declare(b, &format!("fuse{level}"), 2, cfg.fusion_eps));
                let r = if cfg.use_ra {
                    Refiner::Attention(ReverseAttention::declare(b, &format!("ra{level}"), cfg)?)
                } else {
                    Refiner::Plain(ConvBlock::declare(
                        b,
                        &format!("conv{level}"),
                        cfg.width,
                        cfg.width,
                        cfg.use_bottleneck,
                    )?)
                };
                refine.push(r);
            }
            Ok(RefinementPass { fuse, refine })
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, input: &PyramidFeatures) -> Result<RefinementOutput> {
        let mut levels = *input;
        let mut logits = Vec::new();
        let mut traces = Vec::new();
        let mut upper = input.level(7);
        for level in (3..=6).rev() {
            let own = input.level(level);
            let sh = s.graph.shape(own);
            let up = s.graph.resize(upper, sh.h, sh.w)?;
            let fused = self.fuse[level - 3].forward(s, &[own, up])?;
            let out = match &self.refine[level - 3] {
                Refiner::Attention(ra) => {
                    let t = ra.forward(s, fused)?;
                    logits.push((level, t.logits));
                    let out = t.output;
                    traces.push((level, t));
                    out
                }
                Refiner::Plain(block) => block.forward(s, fused)?,
            };
            levels.set(level, out);
            upper = out;
        }
        Ok(RefinementOutput {
            levels,
            logits,
            traces,
        })
    }
}

/// Fine-to-coarse pass over levels 4..7.
#[derive(Debug, Clone)]
pub struct AggregationPass {
    /// Indexed by level - 4 (levels 4..=7).
    pub fuse: Vec<FusionWeights>,
    pub body: Vec<ConvBlock>,
}

impl AggregationPass {
    pub fn declare(b: &mut LayoutBuilder, name: &str, cfg: &DecoderConfig) -> Result<Self> {
        b.scoped(name, |b| {
            let mut fuse = Vec::new();
            let mut body = Vec::new();
            for level in 4..=7 {
                fuse.push(FusionWeights::declare(b, &format!("fuse{level}"), 2, cfg.fusion_eps));
                body.push(ConvBlock::declare(
                    b,
                    &format!("conv{level}"),
                    cfg.width,
                    cfg.width,
                    cfg.use_bottleneck,
                )?);
            }
            Ok(AggregationPass { fuse, body })
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, input: &PyramidFeatures) -> Result<PyramidFeatures> {
        let mut levels = *input;
        let mut lower = input.level(3);
        for level in 4..=7 {
            let own = input.level(level);
            let pooled = s.graph.max_pool2d(lower, 3, 2, 1)?;
            let (ps, os) = (s.graph.shape(pooled), s.graph.shape(own));
            let pooled = if (ps.h, ps.w) != (os.h, os.w) {
                s.graph.resize(pooled, os.h, os.w)?
            } else {
                pooled
            };
            let fused = self.fuse[level - 4].forward(s, &[own, pooled])?;
            let out = self.body[level - 4].forward(s, fused)?;
            levels.set(level, out);
            lower = out;
        }
        Ok(levels)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderOutputs {
    /// Level-3 prediction upsampled to the input size.
    pub final_logits: Var,
    /// `(level, logits)` ordered coarse to fine, at their native sizes.
    pub supervision: Vec<(usize, Var)>,
    /// Reverse-attention traces of the final refinement pass.
    pub traces: Vec<(usize, RaTrace)>,
    pub levels: PyramidFeatures,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub blocks: Vec<(RefinementPass, AggregationPass)>,
    pub last: RefinementPass,
    /// Prediction head on the level-7 output of the last refinement pass.
    pub head7: Conv2d,
    /// Per-level heads (levels 3..=6) used only when reverse attention is off.
    pub plain_heads: Vec<Conv2d>,
}

impl Decoder {
    pub fn declare(b: &mut LayoutBuilder, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        b.scoped("decoder", |b| {
            let mut blocks = Vec::with_capacity(cfg.repeats);
            for d in 0..cfg.repeats {
                let blk = b.scoped(format!("block{d}"), |b| -> Result<_> {
                    Ok((
                        RefinementPass::declare(b, "refine", cfg)?,
                        AggregationPass::declare(b, "aggregate", cfg)?,
                    ))
                })?;
                blocks.push(blk);
            }
            let last = RefinementPass::declare(b, "last", cfg)?;
            let head7 = Conv2d::declare(b, "head7", cfg.width, cfg.n_out(), 3, 1, 1);
            let plain_heads = if cfg.use_ra {
                Vec::new()
            } else {
                (3..=6)
                    .map(|l| Conv2d::declare(b, &format!("head{l}"), cfg.width, cfg.n_out(), 3, 1, 1))
                    .collect()
            };
            Ok(Decoder {
                config: cfg.clone(),
                blocks,
                last,
                head7,
                plain_heads,
            })
        })
    }

    pub fn forward<T: Element>(
        &self,
        s: &mut Session<'_, T>,
        pyramid: &PyramidFeatures,
        input_size: (usize, usize),
    ) -> Result<DecoderOutputs> {
        let c = self.config.width;
        for level in 3..=7 {
            let sh = s.graph.shape(pyramid.level(level));
            if sh.c != c {
                return Err(Error::Shape(format!(
                    "pyramid level {level} has {} channels, decoder width is {c}",
                    sh.c
                )));
            }
        }
        let mut levels = *pyramid;
        for (refine, aggregate) in &self.blocks {
            let r = refine.forward(s, &levels)?;
            levels = aggregate.forward(s, &r.levels)?;
        }
        let last = self.last.forward(s, &levels)?;
        let mut supervision = Vec::with_capacity(5);
        supervision.push((7, self.head7.forward(s, last.levels.level(7))?));
        if self.config.use_ra {
            supervision.extend(last.logits.iter().copied());
        } else {
            for level in (3..=6).rev() {
                let head = &self.plain_heads[level - 3];
                supervision.push((level, head.forward(s, last.levels.level(level))?));
            }
        }
        let level3 = supervision.last().expect("level 3 output").1;
        let final_logits = s.graph.resize(level3, input_size.0, input_size.1)?;
        Ok(DecoderOutputs {
            final_logits,
            supervision,
            traces: last.traces,
            levels: last.levels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    #[test]
    fn config_rules() {
        assert!(DecoderConfig::default().validate().is_ok());
        let soft_binary = DecoderConfig {
            ra_variant: RaVariant::Softmax,
            ..DecoderConfig::default()
        };
        assert!(soft_binary.validate().is_err());
        let zero_d = DecoderConfig {
            repeats: 0,
            ..DecoderConfig::default()
        };
        assert!(zero_d.validate().is_err());
        let odd = DecoderConfig {
            width: 31,
            ..DecoderConfig::default()
        };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn bottleneck_rejects_odd_width() {
        let mut b = LayoutBuilder::new();
        assert!(Bottleneck::declare(&mut b, "x", 7, 7).is_err());
    }

    #[test]
    fn bottleneck_counts_match_store() {
        for c in [32usize, 64, 224] {
            let mut b = LayoutBuilder::new();
            let bn = Bottleneck::declare(&mut b, "b", c, c).unwrap();
            let store = ParamStore::<f32>::initialize(b.specs(), 0);
            let from_store = store.count_where(|p| p.kind.is_conv());
            let h = c / 2;
            let formula = c * h + h + 9 * h * h + h + h * c + c;
            assert_eq!(bn.conv_param_count(), formula);
            assert_eq!(from_store, formula);
        }
    }
}

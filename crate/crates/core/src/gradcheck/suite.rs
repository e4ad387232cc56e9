//! Named gradient-check cases: every differentiable primitive plus
//! composite blocks of the encoder and decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_graph, check_session, random_projection, GradcheckOptions, GradcheckReport};
use crate::decoder::{Decoder, DecoderConfig, RaVariant, ReverseAttention};
use crate::encoder::{Attention, FeedForward, PyramidFeatures};
use crate::error::{Error, Result};
use crate::losses::{categorical_ce, hard_pixel_weights, weighted_focal_loss, weighted_iou_loss, LossConfig};
use crate::nn::{LayoutBuilder, ParamStore};
use crate::tensor::{BatchNormMode, Graph, Shape, Tensor, Var};

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Module {
    Tensor,
    Losses,
    Encoder,
    Rabifpn,
    All,
}

impl std::str::FromStr for Module {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tensor" => Ok(Module::Tensor),
            "losses" => Ok(Module::Losses),
            "encoder" => Ok(Module::Encoder),
            "rabifpn" => Ok(Module::Rabifpn),
            "all" => Ok(Module::All),
            _ => Err(Error::InvalidArgument(format!(
                "unknown module {s:?} (tensor, losses, encoder, rabifpn, all)"
            ))),
        }
    }
}

pub fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn project(f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Build {
    Box::new(move |g, v| {
        let out = f(g, v)?;
        random_projection(g, out, 99)
    })
}

/// `(name, inputs, scalar function)` for every differentiable tensor op.
pub fn primitive_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor<f64>>, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |n, c, h, w| random(Shape::new(n, c, h, w), &mut rng);
    let bn_mean = vec![0.1, -0.2, 0.05];
    let bn_var = vec![0.5, 1.5, 0.8];
    vec![
        (
            "conv2d",
            vec![r(2, 3, 5, 5), r(4, 3, 3, 3), r(1, 1, 1, 4)],
            project(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1)),
        ),
        ("conv2d_1x1", vec![r(1, 3, 4, 4), r(2, 3, 1, 1)], project(|g, v| g.conv2d(v[0], v[1], None, 1, 0))),
        (
            "batch_norm_train",
            vec![r(2, 3, 3, 3), r(1, 1, 1, 3), r(1, 1, 1, 3)],
            project(|g, v| Ok(g.batch_norm2d(v[0], v[1], v[2], BatchNormMode::Train, 1e-5)?.0)),
        ),
        (
            "batch_norm_eval",
            vec![r(2, 3, 3, 3), r(1, 1, 1, 3), r(1, 1, 1, 3)],
            project(move |g, v| {
                let mode = BatchNormMode::Eval {
                    mean: &bn_mean,
                    var: &bn_var,
                };
                Ok(g.batch_norm2d(v[0], v[1], v[2], mode, 1e-5)?.0)
            }),
        ),
        ("max_pool2d", vec![r(2, 2, 5, 5)], project(|g, v| g.max_pool2d(v[0], 3, 2, 1))),
        ("avg_pool2d", vec![r(2, 2, 5, 5)], project(|g, v| g.avg_pool2d(v[0], 3, 2, 1))),
        ("resize_up", vec![r(1, 2, 3, 4)], project(|g, v| g.resize(v[0], 5, 7))),
        ("resize_down", vec![r(1, 2, 6, 6)], project(|g, v| g.resize(v[0], 4, 3))),
        ("sigmoid", vec![r(1, 2, 3, 3)], project(|g, v| Ok(g.sigmoid(v[0])))),
        ("relu", vec![r(1, 2, 3, 3)], project(|g, v| Ok(g.relu(v[0])))),
        ("gelu", vec![r(1, 2, 3, 3)], project(|g, v| Ok(g.gelu(v[0])))),
        ("softmax_channels", vec![r(2, 3, 2, 2)], project(|g, v| Ok(g.softmax_channels(v[0])))),
        ("softmax_rows", vec![r(1, 2, 3, 4)], project(|g, v| Ok(g.softmax_rows(v[0])))),
        ("add", vec![r(1, 2, 3, 3), r(1, 2, 3, 3)], project(|g, v| g.add(v[0], v[1]))),
        ("add_broadcast", vec![r(2, 3, 2, 2), r(2, 1, 2, 2)], project(|g, v| g.add(v[0], v[1]))),
        ("mul", vec![r(1, 2, 3, 3), r(1, 2, 3, 3)], project(|g, v| g.mul(v[0], v[1]))),
        ("mul_broadcast", vec![r(2, 3, 2, 2), r(2, 1, 2, 2)], project(|g, v| g.mul(v[0], v[1]))),
        ("scalar_mul", vec![r(1, 2, 2, 2)], project(|g, v| Ok(g.scalar_mul(v[0], -1.7)))),
        ("sub_from_scalar", vec![r(1, 2, 2, 2)], project(|g, v| Ok(g.sub_from_scalar(1.0, v[0])))),
        (
            "concat_channels",
            vec![r(2, 1, 2, 3), r(2, 3, 2, 3)],
            project(|g, v| g.concat_channels(&[v[0], v[1], v[0]])),
        ),
        ("slice_channels", vec![r(2, 4, 2, 2)], project(|g, v| g.slice_channels(v[0], 1, 2))),
        (
            "token_layout",
            vec![r(2, 4, 2, 3)],
            project(|g, v| {
                let t = g.to_tokens(v[0])?;
                let h = g.split_heads(t, 2)?;
                let s = g.scalar_mul(h, 2.0);
                let m = g.merge_heads(s)?;
                g.from_tokens(m, 2, 3)
            }),
        ),
        ("matmul", vec![r(2, 2, 3, 4), r(2, 2, 4, 5)], project(|g, v| g.matmul(v[0], v[1], false))),
        ("matmul_trans_b", vec![r(2, 2, 3, 4), r(2, 2, 5, 4)], project(|g, v| g.matmul(v[0], v[1], true))),
        (
            "linear",
            vec![r(2, 1, 3, 4), r(1, 1, 5, 4), r(1, 1, 1, 5)],
            project(|g, v| g.linear(v[0], v[1], v[2])),
        ),
        ("sum", vec![r(1, 2, 2, 2)], Box::new(|g, v| Ok(g.sum(v[0])))),
        ("mean", vec![r(1, 2, 2, 2)], Box::new(|g, v| Ok(g.mean(v[0])))),
        (
            "fusion",
            vec![r(1, 2, 3, 3), r(1, 2, 3, 3), r(1, 2, 3, 3), {
                // Keep one weight negative so the relu clamp is exercised.
                Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.7, -0.4, 1.3]).expect("shape")
            }],
            project(|g, v| g.fusion(&v[..3], v[3], 1e-4)),
        ),
    ]
}

/// Fused loss nodes against random logits and targets.
pub fn loss_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor<f64>>, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(2, 1, 4, 4);
    let gt = Tensor::from_fn(shape, |_, _, _, _| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
    let w = hard_pixel_weights(&gt, 3, 5.0).expect("binary mask");
    let logits = random(shape, &mut rng).map(|v| 3.0 * v);
    let labels: Vec<u8> = (0..2 * 16).map(|_| rng.gen_range(0..3)).collect();
    let ce_logits = random(Shape::new(2, 3, 4, 4), &mut rng).map(|v| 2.0 * v);
    let (gt2, w2) = (gt.clone(), w.clone());
    let cfg = LossConfig::default();
    vec![
        (
            "weighted_focal",
            vec![logits.clone()],
            Box::new(move |g, v| weighted_focal_loss(g, v[0], &gt, &w, &cfg)),
        ),
        (
            "weighted_iou",
            vec![logits],
            Box::new(move |g, v| weighted_iou_loss(g, v[0], &gt2, &w2, 1e-6)),
        ),
        ("categorical_ce", vec![ce_logits], Box::new(move |g, v| categorical_ce(g, v[0], &labels))),
    ]
}

fn run_cases(
    cases: Vec<(&'static str, Vec<Tensor<f64>>, Build)>,
    tol: f64,
) -> Result<Vec<GradcheckReport>> {
    cases
        .into_iter()
        .map(|(name, inputs, f)| check_graph(name, &inputs, f, &GradcheckOptions::new(tol)))
        .collect()
}

fn small_decoder_config(width: usize, variant: RaVariant, n_classes: usize) -> DecoderConfig {
    DecoderConfig {
        width,
        repeats: 1,
        n_classes,
        ra_variant: variant,
        ..DecoderConfig::default()
    }
}

/// Reverse-attention block on a `(2, 4, 6, 6)` input.
pub fn ra_block(variant: RaVariant, n_classes: usize, seed: u64) -> Result<GradcheckReport> {
    let cfg = small_decoder_config(4, variant, n_classes);
    let mut b = LayoutBuilder::new();
    let ra = ReverseAttention::declare(&mut b, "ra", &cfg)?;
    let store: ParamStore<f64> = ParamStore::initialize(b.specs(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let x = random(Shape::new(2, 4, 6, 6), &mut rng);
    let name = match variant {
        RaVariant::Sigmoid => "ra_binary",
        RaVariant::Softmax => "ra_softmax",
    };
    check_session(
        name,
        &store,
        &[x],
        true,
        move |s, v| {
            let t = ra.forward(s, v[0])?;
            let a = random_projection(&mut s.graph, t.output, 5)?;
            let l = random_projection(&mut s.graph, t.logits, 6)?;
            s.graph.add(a, l)
        },
        &GradcheckOptions::new(COMPOSITE_TOL),
    )
}

/// Full decoder (`C = 8`, one block) on a two-image pyramid whose level 3
/// is 16x16. Parameters and inputs are sampled to keep the runtime short.
/// Batch norm runs on running statistics: with batch statistics, the many
/// ReLUs downstream sit within `h` of a kink often enough that a few
/// elements disagree at every step size tried. Train-mode batch norm is
/// checked on its own and inside the RA blocks.
pub fn decoder(seed: u64, max_elems: usize) -> Result<GradcheckReport> {
    let cfg = small_decoder_config(8, RaVariant::Sigmoid, 1);
    let mut b = LayoutBuilder::new();
    let dec = Decoder::declare(&mut b, &cfg)?;
    let store: ParamStore<f64> = ParamStore::initialize(b.specs(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let inputs: Vec<Tensor<f64>> = [16, 8, 4, 2, 1]
        .iter()
        .map(|&s| random(Shape::new(2, 8, s, s), &mut rng))
        .collect();
    check_session(
        "decoder",
        &store,
        &inputs,
        false,
        move |s, v| {
            let pyramid = PyramidFeatures::new([v[0], v[1], v[2], v[3], v[4]]);
            let out = dec.forward(s, &pyramid, (32, 32))?;
            let mut total = random_projection(&mut s.graph, out.final_logits, 7)?;
            for (k, &(_, o)) in out.supervision.iter().enumerate() {
                let p = random_projection(&mut s.graph, o, 8 + k as u64)?;
                total = s.graph.add(total, p)?;
            }
            Ok(total)
        },
        &GradcheckOptions::new(COMPOSITE_TOL).sampled(max_elems, seed),
    )
}

/// Spatial-reduction attention followed by the feed-forward block.
pub fn attention_block(seed: u64) -> Result<GradcheckReport> {
    let mut b = LayoutBuilder::new();
    let attn = Attention::declare(&mut b, "attn", 4, 2, 2);
    let ffn = FeedForward::declare(&mut b, "ffn", 4);
    let store: ParamStore<f64> = ParamStore::initialize(b.specs(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
    let x = random(Shape::new(2, 4, 4, 4), &mut rng);
    check_session(
        "attention_block",
        &store,
        &[x],
        true,
        move |s, v| {
            let (y, _) = attn.forward(s, v[0])?;
            let y = ffn.forward(s, y)?;
            random_projection(&mut s.graph, y, 4)
        },
        &GradcheckOptions::new(COMPOSITE_TOL),
    )
}

pub fn run(module: Module, seed: u64) -> Result<Vec<GradcheckReport>> {
    let mut out = Vec::new();
    if matches!(module, Module::Tensor | Module::All) {
        out.extend(run_cases(primitive_cases(seed), PRIMITIVE_TOL)?);
    }
    if matches!(module, Module::Losses | Module::All) {
        out.extend(run_cases(loss_cases(seed), PRIMITIVE_TOL)?);
    }
    if matches!(module, Module::Encoder | Module::All) {
        out.push(attention_block(seed)?);
    }
    if matches!(module, Module::Rabifpn | Module::All) {
        out.push(ra_block(RaVariant::Sigmoid, 1, seed)?);
        out.push(ra_block(RaVariant::Softmax, 3, seed)?);
        out.push(decoder(seed, 24)?);
    }
    Ok(out)
}

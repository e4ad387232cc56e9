//! Parameters, forward sessions and the small set of layers the model uses.
//!
//! Layers are plain structs of [`ParamId`]s and hold no numeric state; the
//! values live in a [`ParamStore`] so one layout can be instantiated at
//! `f32` for training and at `f64` for gradient checks.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, Element, Graph, Shape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    LinearWeight,
    LinearBias,
    NormScale,
    NormShift,
    Fusion,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn is_conv(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::ConvBias)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        use ParamKind::*;
        [
            ConvWeight,
            ConvBias,
            LinearWeight,
            LinearBias,
            NormScale,
            NormShift,
            Fusion,
            RunningMean,
            RunningVar,
        ]
        .get(code as usize)
        .copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    Const(f64),
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub kind: ParamKind,
    pub init: Init,
}

/// Collects parameter declarations while a model layout is built.
#[derive(Debug, Default)]
pub struct LayoutBuilder {
    specs: Vec<ParamSpec>,
    scope: Vec<String>,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scope.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    /// Runs `f` inside a named scope.
    pub fn scoped<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.push_scope(name);
        let r = f(self);
        self.pop_scope();
        r
    }

    pub fn declare(&mut self, name: &str, shape: Shape, kind: ParamKind, init: Init) -> ParamId {
        let mut full = self.scope.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        assert!(
            !self.specs.iter().any(|s| s.name == full),
            "duplicate parameter name {full}"
        );
        self.specs.push(ParamSpec {
            name: full,
            shape,
            kind,
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
}

/// Named parameter values in declaration order.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    /// Instantiates every declared parameter. Values are drawn in `f64` from a
    /// seeded stream so stores of different precision agree up to rounding.
    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Param<T>> = specs
            .iter()
            .map(|s| {
                let data = match s.init {
                    Init::Const(v) => vec![T::from_f64c(v); s.shape.numel()],
                    Init::FanIn(fan_in) => {
                        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                        (0..s.shape.numel())
                            .map(|_| T::from_f64c(rng.gen_range(-bound..bound)))
                            .collect()
                    }
                };
                Param {
                    name: s.name.clone(),
                    kind: s.kind,
                    value: Tensor::from_vec(s.shape, data).expect("declared shape"),
                    grad: vec![T::zero(); s.shape.numel()],
                }
            })
            .collect();
        Self::from_params(params)
    }

    pub fn from_params(params: Vec<Param<T>>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        ParamStore { params, index }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Number of trainable scalars whose names start with `prefix`.
    pub fn count_trainable(&self, prefix: &str) -> usize {
        self.count_where(|p| p.kind.trainable() && p.name.starts_with(prefix))
    }

    pub fn count_where(&self, f: impl Fn(&Param<T>) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| f(p))
            .map(|p| p.value.shape().numel())
            .sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore::from_params(
            self.params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                    grad: vec![U::zero(); p.grad.len()],
                })
                .collect(),
        )
    }
}

/// One forward pass: a fresh graph plus bindings of parameters to leaves.
pub struct Session<'a, T> {
    pub graph: Graph<T>,
    store: &'a mut ParamStore<T>,
    train: bool,
    track_grads: bool,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Element> Session<'a, T> {
    /// `train` selects batch statistics in batch norm (and updates running
    /// statistics); `track_grads` marks trainable parameters as grad leaves.
    pub fn new(store: &'a mut ParamStore<T>, train: bool, track_grads: bool) -> Self {
        let n = store.len();
        Session {
            graph: Graph::new(),
            store,
            train,
            track_grads,
            bound: vec![None; n],
        }
    }

    pub fn training(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = &self.store.params[id.0];
        let grad = self.track_grads && p.kind.trainable();
        let v = self.graph.leaf(p.value.clone(), grad);
        self.bound[id.0] = Some(v);
        v
    }

    /// Bound leaf for a parameter, if it took part in this pass.
    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.graph.leaf(t, requires_grad)
    }

    /// Runs backward from `loss` and adds parameter gradients into the store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)?;
        for (i, slot) in self.bound.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = self.graph.grad(*v) {
                    for (acc, &d) in self.store.params[i].grad.iter_mut().zip(g) {
                        *acc += d;
                    }
                }
            }
        }
        self.graph.zero_grad();
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    None,
    Relu,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn declare(
        b: &mut LayoutBuilder,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        b.scoped(name, |b| Conv2d {
            weight: b.declare(
                "weight",
                Shape::new(out_c, in_c, kernel, kernel),
                ParamKind::ConvWeight,
                Init::FanIn(fan_in),
            ),
            bias: b.declare(
                "bias",
                Shape::new(1, out_c, 1, 1),
                ParamKind::ConvBias,
                Init::FanIn(fan_in),
            ),
            in_c,
            out_c,
            kernel,
            stride,
            pad,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.graph.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.out_c * self.in_c * self.kernel * self.kernel + self.out_c
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn declare(b: &mut LayoutBuilder, name: &str, channels: usize) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        b.scoped(name, |b| BatchNorm2d {
            gamma: b.declare("gamma", shape, ParamKind::NormScale, Init::Const(1.0)),
            beta: b.declare("beta", shape, ParamKind::NormShift, Init::Const(0.0)),
            running_mean: b.declare("running_mean", shape, ParamKind::RunningMean, Init::Const(0.0)),
            running_var: b.declare("running_var", shape, ParamKind::RunningVar, Init::Const(1.0)),
            channels,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        let eps = T::from_f64c(BN_EPS);
        if s.train {
            let (y, stats) = s.graph.batch_norm2d(x, gamma, beta, BatchNormMode::Train, eps)?;
            let (mean, var) = stats.expect("train mode returns batch statistics");
            let xs = s.graph.shape(x);
            let m = xs.n * xs.plane();
            let unbias = if m > 1 {
                T::from_f64c(m as f64 / (m as f64 - 1.0))
            } else {
                T::one()
            };
            let mom = T::from_f64c(BN_MOMENTUM);
            let rm = s.store.params[self.running_mean.0].value.data_mut();
            for (r, &v) in rm.iter_mut().zip(&mean) {
                *r = (T::one() - mom) * *r + mom * v;
            }
            let rv = s.store.params[self.running_var.0].value.data_mut();
            for (r, &v) in rv.iter_mut().zip(&var) {
                *r = (T::one() - mom) * *r + mom * v * unbias;
            }
            Ok(y)
        } else {
            let mean = s.store.params[self.running_mean.0].value.data().to_vec();
            let var = s.store.params[self.running_var.0].value.data().to_vec();
            let (y, _) = s.graph.batch_norm2d(
                x,
                gamma,
                beta,
                BatchNormMode::Eval {
                    mean: &mean,
                    var: &var,
                },
                eps,
            )?;
            Ok(y)
        }
    }
}

/// Convolution followed by batch norm and an optional activation.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Act,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn declare(
        b: &mut LayoutBuilder,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        act: Act,
    ) -> Self {
        b.scoped(name, |b| ConvBn {
            conv: Conv2d::declare(b, "conv", in_c, out_c, kernel, stride, pad),
            bn: BatchNorm2d::declare(b, "bn", out_c),
            act,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        Ok(match self.act {
            Act::None => y,
            Act::Relu => s.graph.relu(y),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn declare(b: &mut LayoutBuilder, name: &str, in_dim: usize, out_dim: usize) -> Self {
        b.scoped(name, |b| Linear {
            weight: b.declare(
                "weight",
                Shape::new(1, 1, out_dim, in_dim),
                ParamKind::LinearWeight,
                Init::FanIn(in_dim),
            ),
            bias: b.declare(
                "bias",
                Shape::new(1, 1, 1, out_dim),
                ParamKind::LinearBias,
                Init::FanIn(in_dim),
            ),
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.graph.linear(x, w, b)
    }
}

/// Learnable scalars for fast normalized fusion, initialized to one.
#[derive(Debug, Clone)]
pub struct FusionWeights {
    pub weights: ParamId,
    pub inputs: usize,
    pub eps: f64,
}

impl FusionWeights {
    pub fn declare(b: &mut LayoutBuilder, name: &str, inputs: usize, eps: f64) -> Self {
        FusionWeights {
            weights: b.declare(name, Shape::new(1, 1, 1, inputs), ParamKind::Fusion, Init::Const(1.0)),
            inputs,
            eps,
        }
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, xs: &[Var]) -> Result<Var> {
        if xs.len() != self.inputs {
            return Err(Error::InvalidArgument(format!(
                "fusion node declared for {} inputs, got {}",
                self.inputs,
                xs.len()
            )));
        }
        let w = s.param(self.weights);
        s.graph.fusion(xs, w, T::from_f64c(self.eps))
    }
}

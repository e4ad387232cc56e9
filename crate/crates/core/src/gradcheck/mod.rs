//! Finite-difference gradient checking in 64-bit precision.
//!
//! Every checked element compares the analytic gradient `ga` against a
//! central difference `gn` with step `h = 1e-4 * max(1, |x|)`, using the
//! relative error `|ga - gn| / max(1, |ga| + |gn|)`. When the central
//! difference straddles a non-differentiable point (relu, max pooling) it
//! disagrees with both one-sided derivatives; such elements are retried with
//! second-order one-sided differences and pass if either side agrees. If
//! kinks lie on both sides, central differences at `h/10` and `h/100` are
//! tried last. Both fallbacks are counted in the report.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore, Session};
use crate::tensor::{Graph, Tensor, Var};

pub mod suite;

pub const STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub tol: f64,
    /// Check at most this many elements per input (sampled by `seed`).
    pub max_elems: Option<usize>,
    pub seed: u64,
}

impl GradcheckOptions {
    pub fn new(tol: f64) -> Self {
        GradcheckOptions {
            tol,
            max_elems: None,
            seed: 0,
        }
    }

    pub fn sampled(mut self, max_elems: usize, seed: u64) -> Self {
        self.max_elems = Some(max_elems);
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Elements that needed the one-sided fallback.
    pub one_sided: usize,
    /// Elements that only agreed at a step 10x or 100x smaller than `h`,
    /// i.e. where several kinks lie within `h` of the point.
    pub refined: usize,
    /// `(input, element, rel_err)` of the worst failing element.
    pub worst_failure: Option<(usize, usize, f64)>,
    pub passed: bool,
}

pub fn rel_err(ga: f64, gn: f64) -> f64 {
    (ga - gn).abs() / 1f64.max(ga.abs() + gn.abs())
}

fn pick(numel: usize, opts: &GradcheckOptions, salt: usize) -> Vec<usize> {
    match opts.max_elems {
        Some(m) if m < numel => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (salt as u64).wrapping_mul(0x9E37_79B9));
            let mut v = sample(&mut rng, numel, m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..numel).collect(),
    }
}

/// Core loop. `values[i][j]` is the unperturbed element, `analytic[i][j]`
/// its gradient, and `eval(i, j, delta)` the loss with that element shifted.
pub fn check_elements(
    name: &str,
    values: &[Vec<f64>],
    analytic: &[Vec<f64>],
    mut eval: impl FnMut(usize, usize, f64) -> Result<f64>,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel_err: 0.0,
        one_sided: 0,
        refined: 0,
        worst_failure: None,
        passed: true,
    };
    for (i, vals) in values.iter().enumerate() {
        if analytic[i].len() != vals.len() {
            return Err(Error::Shape(format!(
                "input {i}: {} gradient entries for {} values",
                analytic[i].len(),
                vals.len()
            )));
        }
        for j in pick(vals.len(), opts, i) {
            let h = STEP * vals[j].abs().max(1.0);
            let ga = analytic[i][j];
            let fp = eval(i, j, h)?;
            let fm = eval(i, j, -h)?;
            let mut err = rel_err(ga, (fp - fm) / (2.0 * h));
            if err >= opts.tol {
                let f0 = eval(i, j, 0.0)?;
                let fp2 = eval(i, j, 2.0 * h)?;
                let fm2 = eval(i, j, -2.0 * h)?;
                let fwd = (-3.0 * f0 + 4.0 * fp - fp2) / (2.0 * h);
                let bwd = (3.0 * f0 - 4.0 * fm + fm2) / (2.0 * h);
                let side = rel_err(ga, fwd).min(rel_err(ga, bwd));
                if side < opts.tol {
                    report.one_sided += 1;
                }
                err = err.min(side);
            }
            if err >= opts.tol {
                for shrink in [1e-1, 1e-2] {
                    let hs = h * shrink;
                    let gs = (eval(i, j, hs)? - eval(i, j, -hs)?) / (2.0 * hs);
                    let e = rel_err(ga, gs);
                    if e < opts.tol {
                        report.refined += 1;
                        err = e;
                        break;
                    }
                }
            }
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(err);
            if err >= opts.tol {
                report.passed = false;
                if report.worst_failure.is_none_or(|(_, _, e)| err > e) {
                    report.worst_failure = Some((i, j, err));
                }
            }
        }
    }
    Ok(report)
}

/// Checks a graph function of `inputs`; `build` must return a scalar node.
pub fn check_graph(
    name: &str,
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.data().len()]))
        .collect();
    let values: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().to_vec()).collect();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    check_elements(
        name,
        &values,
        &analytic,
        |i, j, d| {
            work[i].data_mut()[j] = values[i][j] + d;
            let mut g = Graph::new();
            let vars: Vec<Var> = work.iter().map(|t| g.constant(t.clone())).collect();
            let out = build(&mut g, &vars);
            work[i].data_mut()[j] = values[i][j];
            Ok(g.value(out?).data()[0])
        },
        opts,
    )
}

/// Checks gradients of every trainable parameter in `store` and of `inputs`
/// for a session-based function. Each evaluation runs on a fresh copy of the
/// store so running statistics do not drift between evaluations.
pub fn check_session(
    name: &str,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    train: bool,
    build: impl Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var>,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let trainable: Vec<usize> = store
        .iter()
        .enumerate()
        .filter(|(_, p)| p.kind.trainable())
        .map(|(k, _)| k)
        .collect();
    let base = store.clone();
    let mut scratch = base.clone();
    let (values, analytic) = {
        let mut s = Session::new(&mut scratch, train, true);
        let vars: Vec<Var> = inputs.iter().map(|t| s.input(t.clone(), true)).collect();
        let loss = build(&mut s, &vars)?;
        s.graph.backward(loss)?;
        let grad_of = |v: Option<Var>, n: usize| {
            v.and_then(|v| s.graph.grad(v).map(<[f64]>::to_vec))
                .unwrap_or_else(|| vec![0.0; n])
        };
        let mut values: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().to_vec()).collect();
        let mut analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grad_of(Some(v), t.data().len()))
            .collect();
        for &k in &trainable {
            let p = s.store().get(ParamId(k));
            values.push(p.value.data().to_vec());
            analytic.push(grad_of(s.bound_var(ParamId(k)), p.value.data().len()));
        }
        (values, analytic)
    };
    let n_in = inputs.len();
    let mut work_inputs: Vec<Tensor<f64>> = inputs.to_vec();
    check_elements(
        name,
        &values,
        &analytic,
        |i, j, d| {
            let mut st = base.clone();
            if i < n_in {
                work_inputs[i].data_mut()[j] = values[i][j] + d;
            } else {
                let p = st.iter_mut().nth(trainable[i - n_in]).expect("param index");
                p.value.data_mut()[j] = values[i][j] + d;
            }
            let mut s = Session::new(&mut st, train, false);
            let vars: Vec<Var> = work_inputs.iter().map(|t| s.input(t.clone(), false)).collect();
            let out = build(&mut s, &vars);
            if i < n_in {
                work_inputs[i].data_mut()[j] = values[i][j];
            }
            Ok(s.graph.value(out?).data()[0])
        },
        opts,
    )
}

/// Reduces `x` to a scalar through a fixed random linear functional, which
/// exercises every output element with a distinct weight.
pub fn random_projection(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x);
    let r = Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0));
    let r = g.constant(r);
    let p = g.mul(x, r)?;
    Ok(g.sum(p))
}

//! Adam and the cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Element;

pub const BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// `0.5 * lr0 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside 0..={total_steps}"
        )));
    }
    if step == total_steps {
        return Ok(0.0);
    }
    let t = step as f64 / total_steps as f64;
    Ok(0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// One bias-corrected Adam update; `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Element>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || m.len() != n || v.len() != n {
        return Err(Error::Shape(format!(
            "adam: {n} params, {} grads, {} / {} moments",
            grads.len(),
            m.len(),
            v.len()
        )));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("adam step count starts at 1".into()));
    }
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..n {
        let g = grads[i].to_f64c();
        let mi = b1 * m[i].to_f64c() + (1.0 - b1) * g;
        let vi = b2 * v[i].to_f64c() + (1.0 - b2) * g * g;
        m[i] = T::from_f64c(mi);
        v[i] = T::from_f64c(vi);
        let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
        params[i] = T::from_f64c(params[i].to_f64c() - update);
    }
    Ok(())
}

/// Adam state for every parameter of a store, in store order. Entries of
/// non-trainable parameters stay empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = |p: &crate::nn::Param<T>| {
            if p.kind.trainable() {
                vec![T::zero(); p.value.data().len()]
            } else {
                Vec::new()
            }
        };
        Adam {
            t: 0,
            m: store.iter().map(zeros).collect(),
            v: store.iter().map(zeros).collect(),
        }
    }

    /// Applies accumulated gradients and clears them.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        self.t += 1;
        for (k, p) in store.iter_mut().enumerate() {
            if !p.kind.trainable() {
                continue;
            }
            adam_step(
                p.value.data_mut(),
                &p.grad,
                &mut self.m[k],
                &mut self.v[k],
                self.t,
                lr,
                BETAS,
                ADAM_EPS,
            )?;
        }
        store.zero_grads();
        Ok(())
    }
}

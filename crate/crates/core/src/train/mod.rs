//! Training loop, evaluation and reporting.

pub mod checkpoint;
pub mod eval;
pub mod optim;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use eval::{evaluate, write_report};
pub use optim::{adam_step, cosine_lr, Adam};

use crate::config::TrainConfig;
use crate::data::{augment, image_batch, target_batch, Dataset, Image, Mask};
use crate::error::{Error, Result};
use crate::losses::{deep_supervision_loss, supervised_outputs};
use crate::model::Model;
use crate::nn::{ParamStore, Session};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub scale: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,scale,loss,lr\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.step, r.scale, r.loss, r.lr).unwrap();
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint after the last step.
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

const SCALE_STREAM: u64 = 0x5CA1E;
const ORDER_STREAM: u64 = 0x0EDE5;

/// Runs the configured schedule. With `out`, writes `log.csv`, one
/// checkpoint per epoch and `last.ckpt` there.
pub fn train(cfg: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let expected = if data.is_binary() { 1 } else { data.classes + 1 };
    if cfg.model.decoder.n_classes != expected {
        return Err(Error::Config(format!(
            "model predicts {} classes but the data has {expected}",
            cfg.model.decoder.n_classes
        )));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let model = Model::new(cfg.model.clone())?;
    let mut store: ParamStore<f32> = model.init_params(cfg.seed);
    let mut adam = Adam::new(&store);
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = cfg.max_steps.unwrap_or(cfg.epochs * per_epoch);
    let mut scale_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    scale_rng.set_stream(SCALE_STREAM);
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    let mut epoch = 0u64;
    while step < total {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ epoch);
        order_rng.set_stream(ORDER_STREAM);
        order.shuffle(&mut order_rng);
        for batch in order.chunks(cfg.batch_size) {
            if step == total {
                break;
            }
            let scale = cfg.scales[scale_rng.gen_range(0..cfg.scales.len())];
            let lr = cosine_lr(step, total, cfg.lr)?;
            let loss = train_step(&model, &mut store, cfg, data, batch, scale, epoch)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss { step, lr, detail },
                    e => e,
                })?;
            adam.step(&mut store, lr)?;
            log.push(LogRow { step, scale, loss, lr });
            log::debug!("step {step} scale {scale} loss {loss:.5} lr {lr:.3e}");
            step += 1;
        }
        epoch += 1;
        let ck = Checkpoint::new(&cfg.model, epoch, step as u64, &store, &adam);
        if let Some(dir) = out {
            ck.save(&dir.join(format!("epoch_{epoch:03}.ckpt")))?;
            let path = dir.join("log.csv");
            fs::write(&path, log_csv(&log)).map_err(|e| Error::io(&path, e))?;
        }
        log::info!("epoch {epoch} done at step {step}");
    }
    let checkpoint = Checkpoint::new(&cfg.model, epoch, step as u64, &store, &adam);
    if let Some(dir) = out {
        checkpoint.save(&dir.join("last.ckpt"))?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

/// Forward, loss and backward for one batch; gradients land in `store`.
fn train_step(
    model: &Model,
    store: &mut ParamStore<f32>,
    cfg: &TrainConfig,
    data: &Dataset,
    batch: &[usize],
    scale: usize,
    epoch: u64,
) -> Result<f64> {
    let pairs: Vec<(Image, Mask)> = batch
        .iter()
        .map(|&i| {
            let s = &data.samples[i];
            match &cfg.augment {
                Some(a) => augment(&s.image, &s.mask, &mut a.rng(epoch, i as u64), a, scale),
                None => (s.image.clone(), s.mask.clone()),
            }
        })
        .collect();
    let images: Vec<&Image> = pairs.iter().map(|p| &p.0).collect();
    let masks: Vec<&Mask> = pairs.iter().map(|p| &p.1).collect();
    let x = image_batch::<f32>(&images, scale)?;
    let target = target_batch::<f32>(&masks, scale, data.classes, &cfg.loss)?;
    let mut s = Session::new(store, true, true);
    let input = s.input(x, false);
    let out = model.forward(&mut s, input)?;
    let outputs = supervised_outputs(&out.decoder);
    let loss = deep_supervision_loss(&mut s.graph, &outputs, &target, &cfg.loss)?;
    let value = s.graph.value(loss.total).data()[0] as f64;
    if !value.is_finite() {
        let terms: Vec<String> = loss
            .terms
            .iter()
            .map(|&t| format!("{}", s.graph.value(t).data()[0]))
            .collect();
        return Err(Error::NonFiniteLoss {
            step: 0,
            lr: 0.0,
            detail: format!("loss {value}, terms [{}]", terms.join(", ")),
        });
    }
    s.backward(loss.total)?;
    drop(s);
    // Clamped probabilities can hide a NaN from the loss value.
    if let Some(p) = store.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFiniteLoss {
            step: 0,
            lr: 0.0,
            detail: format!("loss {value}, non-finite gradient in {}", p.name),
        });
    }
    Ok(value)
}

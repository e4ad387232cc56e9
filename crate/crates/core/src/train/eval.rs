//! Checkpoint evaluation and report files.

use std::fs;
use std::path::Path;

use crate::data::{image_batch, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{
    per_class_scores, segmentation_metrics, ComplexitySummary, ImageRecord, MetricsReport, MicroAccumulator,
};
use crate::model::count_params_flops;
use crate::nn::Session;
use crate::tensor::{kernels, Element, Tensor};
use crate::train::Checkpoint;

/// Largest multiple of 32 not above `side` (at least 32).
pub fn eval_size(side: usize) -> usize {
    (side / 32 * 32).max(32)
}

/// Per-pixel argmax over channels of a single-image `(1,C,H,W)` tensor.
pub fn argmax_labels<T: Element>(logits: &Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let plane = s.plane();
    (0..plane)
        .map(|px| {
            let mut best = 0;
            for c in 1..s.c {
                if logits.data()[c * plane + px] > logits.data()[best * plane + px] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Eval-mode metrics of `ckpt` on `data`. Binary models threshold sigmoid
/// probabilities at 0.5; multi-class models take the argmax and also report
/// micro per-class metrics. When `expected_hash` is given it must match the
/// checkpoint's config hash.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, expected_hash: Option<&str>) -> Result<MetricsReport> {
    if let Some(h) = expected_hash {
        if h != ckpt.config_hash {
            return Err(Error::HashMismatch {
                expected: ckpt.config_hash.clone(),
                actual: h.to_string(),
            });
        }
    }
    let model = ckpt.model()?;
    let n_classes = ckpt.config.decoder.n_classes;
    let binary = n_classes == 1;
    if (binary && !data.is_binary()) || (!binary && n_classes != data.classes + 1) {
        return Err(Error::Config(format!(
            "model predicts {n_classes} classes, data has {} foreground classes",
            data.classes
        )));
    }
    let classes: Vec<u8> = (1..=data.classes as u8).collect();
    let mut micro = if binary { None } else { Some(MicroAccumulator::new(&classes)?) };
    let mut store = ckpt.params.clone();
    let mut rows = Vec::new();
    let mut first_size = None;
    for sample in &data.samples {
        let size = eval_size(sample.image.h.min(sample.image.w));
        first_size.get_or_insert(size);
        let x = image_batch::<f32>(&[&sample.image], size)?;
        let gt = sample.mask.resize(size, size).labels;
        let logits = {
            let mut s = Session::new(&mut store, false, false);
            let input = s.input(x, false);
            let out = model.forward(&mut s, input)?;
            s.graph.value(out.decoder.final_logits).clone()
        };
        if binary {
            let probs: Vec<f64> = logits.data().iter().map(|&v| kernels::sigmoid(v) as f64).collect();
            rows.push(ImageRecord {
                image_id: sample.id.clone(),
                class: None,
                scores: segmentation_metrics(&probs, &gt, 0.5),
            });
        } else {
            let pred = argmax_labels(&logits);
            for (c, scores) in per_class_scores(&pred, &gt, &classes) {
                rows.push(ImageRecord {
                    image_id: sample.id.clone(),
                    class: Some(c),
                    scores,
                });
            }
            micro.as_mut().expect("multi-class").add(&pred, &gt)?;
        }
    }
    let complexity = match first_size {
        Some(size) => {
            let c = count_params_flops(&ckpt.config, size)?;
            Some(ComplexitySummary {
                params: c.params,
                flops: c.flops,
            })
        }
        None => None,
    };
    Ok(MetricsReport::new(rows, micro.map(|m| m.finish()), complexity))
}

/// Writes `path` as JSON and a sibling `.csv` with the per-image rows.
pub fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, report.to_json()).map_err(|e| Error::io(path, e))?;
    let csv = path.with_extension("csv");
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))
}

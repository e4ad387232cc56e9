//! Per-image overlap metrics, dataset-level micro metrics and reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel confusion counts for one foreground definition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn count(pred: impl IntoIterator<Item = bool>, gt: impl IntoIterator<Item = bool>) -> Self {
        let mut c = Confusion::default();
        for (p, g) in pred.into_iter().zip(gt) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        c
    }

    pub fn merge(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }

    /// Dice, IoU, precision and recall. With an empty ground truth the
    /// scores are all 1 if the prediction is empty too, otherwise recall is
    /// 1 and the rest 0. An empty prediction against a non-empty mask scores
    /// 0 everywhere.
    pub fn scores(self) -> Scores {
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        if self.tp + self.fn_ == 0 {
            let v = if self.fp == 0 { 1.0 } else { 0.0 };
            return Scores {
                dice: v,
                iou: v,
                precision: v,
                recall: 1.0,
            };
        }
        Scores {
            dice: 2.0 * tp / (2.0 * tp + fp + fn_),
            iou: tp / (tp + fp + fn_),
            precision: if self.tp + self.fp == 0 { 0.0 } else { tp / (tp + fp) },
            recall: tp / (tp + fn_),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Binarizes `probs` at `threshold` (strictly greater counts as foreground)
/// and scores against a binary mask.
pub fn segmentation_metrics(probs: &[f64], gt: &[u8], threshold: f64) -> Scores {
    Confusion::count(probs.iter().map(|&p| p > threshold), gt.iter().map(|&g| g != 0)).scores()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    /// Class id, or `None` for the union of all foreground classes.
    pub class: Option<u8>,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroMetrics {
    pub per_class: Vec<ClassScores>,
    pub generic: ClassScores,
}

/// Accumulates confusion counts over the whole dataset per class and for
/// the union of `classes`, then computes dice and IoU once. Label 0 is
/// background.
#[derive(Debug, Clone)]
pub struct MicroAccumulator {
    classes: Vec<u8>,
    per_class: Vec<Confusion>,
    generic: Confusion,
}

impl MicroAccumulator {
    pub fn new(classes: &[u8]) -> Result<Self> {
        if classes.is_empty() || classes.contains(&0) {
            return Err(Error::InvalidArgument(
                "class set must be non-empty and exclude background 0".into(),
            ));
        }
        Ok(MicroAccumulator {
            classes: classes.to_vec(),
            per_class: vec![Confusion::default(); classes.len()],
            generic: Confusion::default(),
        })
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        if let Some(&l) = pred
            .iter()
            .chain(gt)
            .find(|&&l| l != 0 && !self.classes.contains(&l))
        {
            return Err(Error::InvalidArgument(format!("unknown class id {l}")));
        }
        for (k, &c) in self.classes.iter().enumerate() {
            let conf = Confusion::count(pred.iter().map(|&p| p == c), gt.iter().map(|&g| g == c));
            self.per_class[k] = self.per_class[k].merge(conf);
        }
        let conf = Confusion::count(pred.iter().map(|&p| p != 0), gt.iter().map(|&g| g != 0));
        self.generic = self.generic.merge(conf);
        Ok(())
    }

    pub fn finish(&self) -> MicroMetrics {
        let score = |class, c: Confusion| {
            let s = c.scores();
            ClassScores {
                class,
                dice: s.dice,
                iou: s.iou,
            }
        };
        MicroMetrics {
            per_class: self
                .classes
                .iter()
                .zip(&self.per_class)
                .map(|(&c, &conf)| score(Some(c), conf))
                .collect(),
            generic: score(None, self.generic),
        }
    }
}

/// Micro dice/IoU over a list of `(pred, gt)` label maps.
pub fn micro_class_metrics(pairs: &[(&[u8], &[u8])], classes: &[u8]) -> Result<MicroMetrics> {
    let mut acc = MicroAccumulator::new(classes)?;
    for (p, g) in pairs {
        acc.add(p, g)?;
    }
    Ok(acc.finish())
}

/// Per-class scores of one multi-class image, one entry per class in `classes`.
pub fn per_class_scores(pred: &[u8], gt: &[u8], classes: &[u8]) -> Vec<(u8, Scores)> {
    classes
        .iter()
        .map(|&c| {
            let conf = Confusion::count(pred.iter().map(|&p| p == c), gt.iter().map(|&g| g == c));
            (c, conf.scores())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Aggregate { mean: 0.0, std: 0.0 };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Aggregate { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    /// Class id for multi-class rows.
    pub class: Option<u8>,
    pub scores: Scores,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexitySummary {
    pub params: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// One row per image (binary) or per image and class (multi-class).
    pub per_image: Vec<ImageRecord>,
    pub dice: Aggregate,
    pub iou: Aggregate,
    pub precision: Aggregate,
    pub recall: Aggregate,
    pub micro: Option<MicroMetrics>,
    pub complexity: Option<ComplexitySummary>,
}

impl MetricsReport {
    pub fn new(per_image: Vec<ImageRecord>, micro: Option<MicroMetrics>, complexity: Option<ComplexitySummary>) -> Self {
        let agg = |f: fn(&Scores) -> f64| Aggregate::of(per_image.iter().map(|r| f(&r.scores)));
        MetricsReport {
            dice: agg(|s| s.dice),
            iou: agg(|s| s.iou),
            precision: agg(|s| s.precision),
            recall: agg(|s| s.recall),
            per_image,
            micro,
            complexity,
        }
    }

    /// Mean dice over rows.
    pub fn mdice(&self) -> f64 {
        self.dice.mean
    }

    pub fn miou(&self) -> f64 {
        self.iou.mean
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let multi = self.per_image.iter().any(|r| r.class.is_some());
        let mut out = String::from("image_id,dice,iou,precision,recall");
        if multi {
            out.push_str(",class");
        }
        out.push('\n');
        for r in &self.per_image {
            let s = &r.scores;
            write!(out, "{},{},{},{},{}", r.image_id, s.dice, s.iou, s.precision, s.recall).unwrap();
            if multi {
                write!(out, ",{}", r.class.map(|c| c.to_string()).unwrap_or_default()).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

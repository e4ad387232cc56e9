//! Train/test index splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SplitMode {
    Holdout { train_fraction: f64 },
    Kfold { k: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` under `seed` and partitions it. Holdout yields one split;
/// k-fold yields `k` splits whose test sets are disjoint and cover `0..n`.
pub fn make_splits(n: usize, mode: SplitMode, seed: u64) -> Result<Vec<Split>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    match mode {
        SplitMode::Holdout { train_fraction } => {
            if !(train_fraction > 0.0 && train_fraction < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "train fraction {train_fraction} outside (0, 1)"
                )));
            }
            let cut = (n as f64 * train_fraction).round() as usize;
            let mut train = order[..cut].to_vec();
            let mut test = order[cut..].to_vec();
            train.sort_unstable();
            test.sort_unstable();
            Ok(vec![Split { train, test }])
        }
        SplitMode::Kfold { k } => {
            if k < 2 {
                return Err(Error::InvalidArgument(format!("k-fold needs k >= 2, got {k}")));
            }
            if k > n {
                return Err(Error::InvalidArgument(format!("{k} folds for {n} samples")));
            }
            let bounds: Vec<usize> = (0..=k).map(|f| f * n / k).collect();
            Ok((0..k)
                .map(|f| {
                    let mut test = order[bounds[f]..bounds[f + 1]].to_vec();
                    let mut train: Vec<usize> = order[..bounds[f]]
                        .iter()
                        .chain(&order[bounds[f + 1]..])
                        .copied()
                        .collect();
                    test.sort_unstable();
                    train.sort_unstable();
                    Split { train, test }
                })
                .collect())
        }
    }
}

//! Augmentation, fold splitting and early stopping.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_axis_h: bool,
    pub flip_axis_w: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_axis_h: true,
            flip_axis_w: true,
        }
    }
}

/// Axis of `H` and `W` in a single-sample `(C, D, H, W)` volume.
pub const AXIS_H: usize = 2;
pub const AXIS_W: usize = 3;

/// Flips image and mask together along each enabled in-plane axis with
/// probability one half.
pub fn augment_flip<R: Rng>(
    image: &Tensor<f32>,
    mask: &Tensor<u8>,
    rng: &mut R,
    config: &AugmentConfig,
) -> (Tensor<f32>, Tensor<u8>) {
    let (mut image, mut mask) = (image.clone(), mask.clone());
    for (enabled, axis) in [(config.flip_axis_h, AXIS_H), (config.flip_axis_w, AXIS_W)] {
        if enabled && rng.gen_bool(0.5) {
            image = image.flip(axis);
            mask = mask.flip(axis);
        }
    }
    (image, mask)
}

/// One cross-validation split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold<I> {
    pub train: Vec<I>,
    pub val: Vec<I>,
}

/// Seeded shuffle followed by a contiguous partition into `k` validation
/// folds; the first `n mod k` folds are one larger.
pub fn kfold_split<I: Clone>(ids: &[I], k: usize, seed: u64) -> Result<Vec<Fold<I>>> {
    let n = ids.len();
    if k < 2 || k > n {
        return Err(Error::FoldCount { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let end = start + len;
        let pick = |r: &[usize]| r.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>();
        let mut train = pick(&order[..start]);
        train.extend(pick(&order[end..]));
        folds.push(Fold {
            train,
            val: pick(&order[start..end]),
        });
        start = end;
    }
    Ok(folds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Stalled,
    Stop,
}

/// Patience counter over a quantity where larger is better.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: None,
            best_epoch: 0,
            epochs_since_improvement: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> Verdict {
        let better = match self.best {
            None => true,
            Some(b) => value > b + self.min_delta,
        };
        if better {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.epochs_since_improvement = 0;
            return Verdict::Improved;
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Stalled
        }
    }
}

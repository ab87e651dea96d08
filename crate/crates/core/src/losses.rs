//! Segmentation losses and evaluation metrics.
//!
//! Losses are recorded on the tape so they can be differentiated; metrics
//! work on hard label volumes produced by [`argmax_labels`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::engine::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Class index whose softmax channel feeds the Dice loss.
pub const FOREGROUND: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Dice smoothing term.
    pub epsilon: f64,
    /// Weight of the cross-entropy term added to the Dice loss.
    pub ce_weight: f64,
    pub class_count: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            ce_weight: 0.0,
            class_count: 2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("loss epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.ce_weight >= 0.0 && self.ce_weight.is_finite()) {
            return Err(Error::InvalidConfig(format!("ce_weight must be >= 0, got {}", self.ce_weight)));
        }
        if self.class_count < 2 {
            return Err(Error::InvalidConfig(format!(
                "class_count must be >= 2, got {}",
                self.class_count
            )));
        }
        Ok(())
    }
}

/// Soft Dice loss of a foreground probability map against a binary target.
pub fn dice_loss<T: Real>(tape: &mut Tape<T>, probs_fg: Var, target_fg: &Tensor<T>, config: &LossConfig) -> Result<Var> {
    tape.dice_loss(probs_fg, target_fg, T::of(config.epsilon))
}

/// Voxel-mean cross-entropy of channel logits against a one-hot target.
pub fn ce_loss<T: Real>(tape: &mut Tape<T>, logits: Var, target_onehot: &Tensor<T>, _config: &LossConfig) -> Result<Var> {
    tape.cross_entropy(logits, target_onehot)
}

/// `dice + λ·ce` for logits `(N,C,D,H,W)` and a label volume `(N,1,D,H,W)`.
pub fn combined_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &Tensor<u8>, config: &LossConfig) -> Result<Var> {
    let [n, c, d, h, w] = dims(tape.shape(logits), "combined_loss")?;
    if c != config.class_count {
        return Err(shape_err(
            "combined_loss",
            format!("logits have {c} channels, loss expects {}", config.class_count),
        ));
    }
    if labels.shape() != [n, 1, d, h, w] {
        return Err(shape_err(
            "combined_loss",
            format!("labels {:?} vs logits {:?}", labels.shape(), tape.shape(logits)),
        ));
    }
    let probs = tape.softmax_channels(logits)?;
    let fg = tape.select_channel(probs, FOREGROUND)?;
    let target = labels.map(|v| if usize::from(v) == FOREGROUND { T::one() } else { T::zero() });
    let dice = dice_loss(tape, fg, &target, config)?;
    if config.ce_weight == 0.0 {
        return Ok(dice);
    }
    let onehot = one_hot(labels, c)?;
    let ce = ce_loss(tape, logits, &onehot, config)?;
    let ce = tape.scale(ce, T::of(config.ce_weight))?;
    tape.add(dice, ce)
}

/// Expands a `(N,1,D,H,W)` label volume into `(N,C,D,H,W)` indicators.
pub fn one_hot<T: Real>(labels: &Tensor<u8>, classes: usize) -> Result<Tensor<T>> {
    let [n, one, d, h, w] = labels.dims5("one_hot")?;
    if one != 1 {
        return Err(shape_err("one_hot", format!("expected one label channel, got {one}")));
    }
    let s = d * h * w;
    let mut data = vec![T::zero(); n * classes * s];
    for i in 0..n {
        for (p, &l) in labels.data()[i * s..(i + 1) * s].iter().enumerate() {
            let l = usize::from(l);
            if l >= classes {
                return Err(Error::NotOneHot(format!("label {l} at sample {i}, voxel {p} exceeds {classes} classes")));
            }
            data[(i * classes + l) * s + p] = T::one();
        }
    }
    Tensor::new(vec![n, classes, d, h, w], data)
}

/// Per-voxel argmax over the channel axis; ties resolve to the lower class.
pub fn argmax_labels<T: Real>(scores: &Tensor<T>) -> Result<Tensor<u8>> {
    let [n, c, d, h, w] = scores.dims5("argmax_labels")?;
    if c == 0 || c > 256 {
        return Err(shape_err("argmax_labels", format!("unsupported class count {c}")));
    }
    let s = d * h * w;
    let x = scores.data();
    let mut out = Vec::with_capacity(n * s);
    for i in 0..n {
        for p in 0..s {
            let mut best = 0;
            for k in 1..c {
                if x[(i * c + k) * s + p] > x[(i * c + best) * s + p] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    Tensor::new(vec![n, 1, d, h, w], out)
}

/// Voxel tallies for the foreground (any non-zero class) plus per-class
/// intersection and union.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        Self {
            intersection: vec![0; classes],
            union: vec![0; classes],
            ..Default::default()
        }
    }

    pub fn voxels(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Adds another tally over the same class set.
    pub fn merge(&mut self, other: &Self) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
        if self.intersection.len() < other.intersection.len() {
            self.intersection.resize(other.intersection.len(), 0);
            self.union.resize(other.union.len(), 0);
        }
        for (k, (i, u)) in other.intersection.iter().zip(&other.union).enumerate() {
            self.intersection[k] += i;
            self.union[k] += u;
        }
    }
}

/// Tallies predicted against reference labels of identical shape.
pub fn confusion_counts(pred: &Tensor<u8>, target: &Tensor<u8>, classes: usize) -> Result<ConfusionCounts> {
    if pred.shape() != target.shape() {
        return Err(shape_err(
            "confusion_counts",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let mut c = ConfusionCounts::new(classes);
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let (pi, ti) = (usize::from(p), usize::from(t));
        if pi >= classes || ti >= classes {
            return Err(shape_err(
                "confusion_counts",
                format!("label {} outside {classes} classes", pi.max(ti)),
            ));
        }
        match (pi != 0, ti != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
        if pi == ti {
            c.intersection[pi] += 1;
            c.union[pi] += 1;
        } else {
            c.union[pi] += 1;
            c.union[ti] += 1;
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sen: f64,
    pub dsc: f64,
    pub pre: f64,
    pub miou: f64,
}

impl Metrics {
    pub fn values(&self) -> [f64; 4] {
        [self.sen, self.dsc, self.pre, self.miou]
    }

    pub fn from_values(v: [f64; 4]) -> Self {
        Self {
            sen: v[0],
            dsc: v[1],
            pre: v[2],
            miou: v[3],
        }
    }

    pub const NAMES: [&'static str; 4] = ["sen", "dsc", "pre", "miou"];
}

/// A ratio whose empty denominator means the class is absent from both
/// prediction and reference, scored as a perfect match.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// SEN, DSC, PRE and mIoU from voxel tallies.
pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let absent = c.tp + c.fp + c.fn_ == 0;
    let sen = if c.tp + c.fn_ == 0 {
        if absent { 1.0 } else { 0.0 }
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    let pre = if c.tp + c.fp == 0 {
        if absent { 1.0 } else { 0.0 }
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let dsc = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    let miou = if c.union.is_empty() {
        1.0
    } else {
        c.intersection
            .iter()
            .zip(&c.union)
            .map(|(&i, &u)| ratio(i, u))
            .sum::<f64>()
            / c.union.len() as f64
    };
    Metrics { sen, dsc, pre, miou }
}

fn dims(shape: &[usize], op: &'static str) -> Result<[usize; 5]> {
    match *shape {
        [n, c, d, h, w] => Ok([n, c, d, h, w]),
        _ => Err(shape_err(op, format!("expected (N,C,D,H,W), got {shape:?}"))),
    }
}

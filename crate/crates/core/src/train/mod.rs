//! Training protocol: single-run fitting with early stopping and k-fold
//! cross-validation.

mod optim;
mod protocol;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{Optimizer, OptimizerConfig};
pub use protocol::{augment_flip, kfold_split, AugmentConfig, EarlyStopping, Fold, Verdict, AXIS_H, AXIS_W};

use crate::blocks::Mode;
use crate::engine::Tape;
use crate::error::{Error, Result};
use crate::losses::{argmax_labels, combined_loss, confusion_counts, metrics, ConfusionCounts, LossConfig, Metrics};
use crate::network::{CsuNet3d, NetworkConfig};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Quantity watched by early stopping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    ValDsc,
    ValLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub folds: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Smallest change of the monitored quantity that counts as progress.
    pub min_delta: f64,
    pub monitor: Monitor,
    /// Ends a run as soon as validation DSC reaches this value.
    pub stop_at_dsc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            batch_size: 2,
            max_epochs: 100,
            patience: 10,
            folds: 5,
            augment: AugmentConfig::default(),
            seed: 0,
            min_delta: 1e-6,
            monitor: Monitor::ValDsc,
            stop_at_dsc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.patience < 1 {
            return bad(format!("patience must be >= 1, got {}", self.patience));
        }
        if self.folds < 2 {
            return bad(format!("folds must be >= 2, got {}", self.folds));
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return bad(format!(
                "batch_size and max_epochs must be >= 1, got {} and {}",
                self.batch_size, self.max_epochs
            ));
        }
        if !(self.min_delta >= 0.0) {
            return bad(format!("min_delta must be >= 0, got {}", self.min_delta));
        }
        Ok(())
    }
}

/// One image/mask pair, each `(1, D, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<u8>,
}

/// Stacks samples into an `(N,1,D,H,W)` image batch and label batch.
pub fn collate<T: Real>(items: &[(&Tensor<f32>, &Tensor<u8>)]) -> Result<(Tensor<T>, Tensor<u8>)> {
    let images: Vec<&Tensor<f32>> = items.iter().map(|p| p.0).collect();
    let masks: Vec<&Tensor<u8>> = items.iter().map(|p| p.1).collect();
    let x = Tensor::stack(&images)?;
    Ok((x.map(|v| T::of(f64::from(v))), Tensor::stack(&masks)?))
}

/// Forward in training mode, loss, backward, one optimizer update.
/// Returns the loss before the update.
pub fn train_step<T: Real>(
    net: &mut CsuNet3d<T>,
    images: &Tensor<T>,
    labels: &Tensor<u8>,
    loss: &LossConfig,
    optimizer: &mut Optimizer<T>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone())?;
    let logits = net.forward(&mut tape, x, Mode::Train)?;
    let l = combined_loss(&mut tape, logits, labels, loss)?;
    let value = tape.value(l).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let grads = tape.backward(l)?;
    net.store.zero_grad();
    grads.accumulate_into(&mut net.store);
    optimizer.step(&mut net.store)?;
    net.store.zero_grad();
    Ok(value)
}

/// Eval-mode scores on a sample set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean over samples of each per-sample metric.
    pub metrics: Metrics,
    pub per_sample: Vec<Metrics>,
    /// Voxel tallies pooled over every sample.
    pub counts: ConfusionCounts,
    pub loss: f64,
}

pub fn evaluate<T: Real>(net: &mut CsuNet3d<T>, samples: &[Sample], loss: &LossConfig) -> Result<Evaluation> {
    let classes = net.config.num_classes;
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut counts = ConfusionCounts::new(classes);
    let mut total_loss = 0.0;
    for s in samples {
        let (x, y) = collate::<T>(&[(&s.image, &s.mask)])?;
        let mut tape = Tape::new();
        let xv = tape.constant(x)?;
        let logits = net.forward(&mut tape, xv, Mode::Eval)?;
        let l = combined_loss(&mut tape, logits, &y, loss)?;
        total_loss += tape.value(l).data()[0].as_f64();
        let pred = argmax_labels(tape.value(logits))?;
        let c = confusion_counts(&pred, &y, classes)?;
        per_sample.push(metrics(&c));
        counts.merge(&c);
    }
    let n = samples.len().max(1) as f64;
    let mut mean = [0.0; 4];
    for m in &per_sample {
        for (acc, v) in mean.iter_mut().zip(m.values()) {
            *acc += v / n;
        }
    }
    Ok(Evaluation {
        metrics: Metrics::from_values(mean),
        per_sample,
        counts,
        loss: total_loss / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val: Metrics,
    pub improved: bool,
}

/// Mutable state of a run between epochs.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub epoch: usize,
    pub early: EarlyStopping,
    pub optimizer: Optimizer<T>,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
}

impl<T: Real> TrainState<T> {
    pub fn new(config: &TrainConfig, store: &ParamStore<T>) -> Self {
        Self {
            epoch: 0,
            early: EarlyStopping::new(config.patience, config.min_delta),
            optimizer: Optimizer::new(config.optimizer.clone(), store),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            history: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome<T> {
    /// Parameters of the best epoch; also loaded back into the network.
    pub best: ParamStore<T>,
    pub best_epoch: usize,
    pub best_metrics: Metrics,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Trains `net` on `train`, selecting the epoch with the best validation
/// score. On return `net` holds the best parameters.
pub fn fit<T: Real>(
    net: &mut CsuNet3d<T>,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    loss: &LossConfig,
) -> Result<FitOutcome<T>> {
    config.validate()?;
    loss.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "fit needs non-empty sets, got {} train and {} val samples",
            train.len(),
            val.len()
        )));
    }
    let mut state = TrainState::new(config, &net.store);
    let mut best = net.store.clone();
    let mut best_metrics = Metrics::default();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        state.epoch = epoch;
        order.shuffle(&mut state.rng);
        let mut losses = 0.0;
        let batches = order.chunks(config.batch_size);
        let steps = batches.len();
        for (step, batch) in batches.enumerate() {
            let pairs: Vec<(Tensor<f32>, Tensor<u8>)> = batch
                .iter()
                .map(|&i| augment_flip(&train[i].image, &train[i].mask, &mut state.rng, &config.augment))
                .collect();
            let refs: Vec<_> = pairs.iter().map(|(a, b)| (a, b)).collect();
            let (x, y) = collate::<T>(&refs)?;
            losses += match train_step(net, &x, &y, loss, &mut state.optimizer) {
                Ok(l) => l,
                Err(Error::NonFinite { .. }) => return Err(Error::NonFiniteLoss { epoch, step: step + 1 }),
                Err(e) => return Err(e),
            };
        }

        let eval = evaluate(net, val, loss)?;
        let watched = match config.monitor {
            Monitor::ValDsc => eval.metrics.dsc,
            Monitor::ValLoss => -eval.loss,
        };
        let verdict = state.early.observe(epoch, watched);
        let improved = verdict == Verdict::Improved;
        if improved {
            best = net.store.clone();
            best_metrics = eval.metrics;
        }
        log::info!(
            "epoch {epoch}: train loss {:.5}, val loss {:.5}, val dsc {:.4}{}",
            losses / steps as f64,
            eval.loss,
            eval.metrics.dsc,
            if improved { " *" } else { "" }
        );
        state.history.push(EpochRecord {
            epoch,
            train_loss: losses / steps as f64,
            val_loss: eval.loss,
            val: eval.metrics,
            improved,
        });
        if verdict == Verdict::Stop {
            stopped_early = true;
            break;
        }
        if config.stop_at_dsc.is_some_and(|t| eval.metrics.dsc >= t) {
            break;
        }
    }
    net.store.copy_values_from(&best)?;
    Ok(FitOutcome {
        best,
        best_epoch: state.early.best_epoch,
        best_metrics,
        history: state.history,
        stopped_early,
    })
}

/// Fully resolved configuration recorded alongside results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mean: Metrics,
    /// Sample standard deviation across folds.
    pub std: Metrics,
    pub config: ReportConfig,
}

/// Mean and sample standard deviation of each metric.
pub fn mean_std(rows: &[Metrics]) -> (Metrics, Metrics) {
    let n = rows.len() as f64;
    let mut mean = [0.0; 4];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.values()) {
            *m += v / n;
        }
    }
    let mut var = [0.0; 4];
    if rows.len() > 1 {
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.values()).zip(mean) {
                *s += (v - m) * (v - m) / (n - 1.0);
            }
        }
    }
    (Metrics::from_values(mean), Metrics::from_values(var.map(Float::sqrt)))
}

/// One freshly initialised network per fold, fitted on the other folds and
/// scored on its own.
pub fn cross_validate<T: Real>(
    dataset: &[Sample],
    network: &NetworkConfig,
    config: &TrainConfig,
    loss: &LossConfig,
) -> Result<CvReport> {
    cross_validate_with::<T>(dataset, network, config, loss, |_, _, _| Ok(()))
}

/// [`cross_validate`] with a hook that sees each fold's fitted network.
pub fn cross_validate_with<T: Real>(
    dataset: &[Sample],
    network: &NetworkConfig,
    config: &TrainConfig,
    loss: &LossConfig,
    mut on_fold: impl FnMut(usize, &CsuNet3d<T>, &FitOutcome<T>) -> Result<()>,
) -> Result<CvReport> {
    config.validate()?;
    let ids: Vec<usize> = (0..dataset.len()).collect();
    let folds = kfold_split(&ids, config.folds, config.seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| dataset[i].clone()).collect::<Vec<_>>();
    let mut rows = Vec::with_capacity(folds.len());
    for (f, fold) in folds.iter().enumerate() {
        log::info!("fold {}/{}: {} train, {} val", f + 1, folds.len(), fold.train.len(), fold.val.len());
        let (train, val) = (pick(&fold.train), pick(&fold.val));
        let mut net = CsuNet3d::<T>::build(network)?;
        let out = fit(&mut net, &train, &val, config, loss)?;
        let eval = evaluate(&mut net, &val, loss)?;
        on_fold(f, &net, &out)?;
        rows.push(FoldResult {
            fold: f,
            metrics: eval.metrics,
            best_epoch: out.best_epoch,
            epochs_run: out.history.len(),
            val_ids: val.iter().map(|s| s.id.clone()).collect(),
        });
    }
    let (mean, std) = mean_std(&rows.iter().map(|r| r.metrics).collect::<Vec<_>>());
    Ok(CvReport {
        folds: rows,
        mean,
        std,
        config: ReportConfig {
            network: network.clone(),
            train: config.clone(),
            loss: loss.clone(),
        },
    })
}

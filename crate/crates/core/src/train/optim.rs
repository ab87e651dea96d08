use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    /// `v ← μ·v + g`, `p ← p − lr·v`
    Sgd { lr: f64, momentum: f64 },
    /// Bias-corrected Adam.
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self::Sgd { lr, momentum }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Self::Sgd { lr, .. } | Self::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Sgd { lr, momentum } => lr >= 0.0 && (0.0..1.0).contains(&momentum),
            Self::Adam { lr, beta1, beta2, eps } => {
                lr >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("optimizer hyper-parameters out of range: {self:?}")))
        }
    }
}

/// Optimizer with one moment buffer (SGD) or two (Adam) per trainable
/// registry entry, shaped like the entry.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig, store: &ParamStore<T>) -> Self {
        let buffers = || {
            store
                .iter()
                .map(|(_, p)| p.trainable.then(|| Tensor::zeros(p.value.shape().to_vec())))
                .collect::<Vec<_>>()
        };
        let second = match config {
            OptimizerConfig::Adam { .. } => buffers(),
            OptimizerConfig::Sgd { .. } => store.iter().map(|_| None).collect(),
        };
        Self {
            config,
            step: 0,
            first: buffers(),
            second,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First-moment (velocity) buffer of registry entry `i`.
    pub fn first_moment(&self, i: usize) -> Option<&Tensor<T>> {
        self.first.get(i).and_then(Option::as_ref)
    }

    pub fn second_moment(&self, i: usize) -> Option<&Tensor<T>> {
        self.second.get(i).and_then(Option::as_ref)
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(Error::InvalidConfig(format!(
                "optimizer built for {} registry entries, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        for (i, p) in store.iter_mut().enumerate() {
            let Some(m) = self.first[i].as_mut() else { continue };
            let value = p.value.data_mut();
            let grad = p.grad.data();
            match self.config {
                OptimizerConfig::Sgd { lr, momentum } => {
                    let (lr, mu) = (T::of(lr), T::of(momentum));
                    for ((x, v), &g) in value.iter_mut().zip(m.data_mut()).zip(grad) {
                        *v = mu * *v + g;
                        *x -= lr * *v;
                    }
                }
                OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                    let s = self.second[i].as_mut().expect("adam second moment");
                    let (b1, b2) = (T::of(beta1), T::of(beta2));
                    let c1 = T::one() - b1.powi(t);
                    let c2 = T::one() - b2.powi(t);
                    let (lr, eps) = (T::of(lr), T::of(eps));
                    for (((x, m), v), &g) in value.iter_mut().zip(m.data_mut()).zip(s.data_mut()).zip(grad) {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let mh = *m / c1;
                        let vh = *v / c2;
                        *x -= lr * mh / (Float::sqrt(vh) + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

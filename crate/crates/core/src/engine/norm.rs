//! Batch and instance normalisation over `(N, C, S)` views.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::real::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Statistics per channel over `(N, D, H, W)`, running averages for eval.
    #[default]
    Batch,
    /// Statistics per `(sample, channel)` over `(D, H, W)` in every mode.
    Instance,
}

#[derive(Clone, Debug)]
pub struct NormContext<T> {
    pub mode: NormMode,
    /// True when the statistics came from the input itself, so the backward
    /// pass must differentiate through them.
    pub batch_stats: bool,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub dims: [usize; 3],
}

impl<T: Real> NormContext<T> {
    fn group(&self, n: usize, c: usize) -> usize {
        match self.mode {
            NormMode::Batch => c,
            NormMode::Instance => n * self.dims[1] + c,
        }
    }
}

/// Per-channel batch statistics: biased mean and unbiased variance.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

pub fn forward<T: Real>(
    x: &[T],
    dims: [usize; 3],
    gamma: &[T],
    beta: &[T],
    mode: NormMode,
    fixed: Option<(&[T], &[T])>,
    eps: T,
) -> (Vec<T>, NormContext<T>, Option<BatchStats<T>>) {
    let [n, c, s] = dims;
    let groups = match mode {
        NormMode::Batch => c,
        NormMode::Instance => n * c,
    };
    let mut ctx = NormContext {
        mode,
        batch_stats: fixed.is_none(),
        xhat: vec![T::zero(); x.len()],
        inv_std: vec![T::zero(); groups],
        dims,
    };
    let mut mean = vec![T::zero(); groups];
    let mut stats = None;
    match fixed {
        Some((m, v)) => {
            for g in 0..groups {
                mean[g] = m[g];
                ctx.inv_std[g] = T::one() / (v[g] + eps).sqrt();
            }
        }
        None => {
            let mut count = vec![0usize; groups];
            for b in 0..n {
                for ch in 0..c {
                    let g = ctx.group(b, ch);
                    let off = (b * c + ch) * s;
                    mean[g] += x[off..off + s].iter().copied().sum::<T>();
                    count[g] += s;
                }
            }
            let mut var = vec![T::zero(); groups];
            for g in 0..groups {
                mean[g] = mean[g] / T::of(count[g] as f64);
            }
            for b in 0..n {
                for ch in 0..c {
                    let g = ctx.group(b, ch);
                    let off = (b * c + ch) * s;
                    let m = mean[g];
                    var[g] += x[off..off + s]
                        .iter()
                        .map(|&v| (v - m) * (v - m))
                        .sum::<T>();
                }
            }
            let mut unbiased = vec![T::zero(); groups];
            for g in 0..groups {
                let m = count[g] as f64;
                unbiased[g] = var[g] / T::of((m - 1.0).max(1.0));
                var[g] = var[g] / T::of(m);
                ctx.inv_std[g] = T::one() / (var[g] + eps).sqrt();
            }
            if mode == NormMode::Batch {
                stats = Some(BatchStats {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                });
            }
        }
    }
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let g = ctx.group(b, ch);
            let off = (b * c + ch) * s;
            let (m, is) = (mean[g], ctx.inv_std[g]);
            for i in off..off + s {
                let xh = (x[i] - m) * is;
                ctx.xhat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (y, ctx, stats)
}

pub struct NormGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn backward<T: Real>(ctx: &NormContext<T>, gamma: &[T], gy: &[T]) -> NormGrads<T> {
    let [n, c, s] = ctx.dims;
    let groups = ctx.inv_std.len();
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    let mut sum_d = vec![T::zero(); groups];
    let mut sum_dx = vec![T::zero(); groups];
    let mut count = vec![0usize; groups];
    for b in 0..n {
        for ch in 0..c {
            let g = ctx.group(b, ch);
            let off = (b * c + ch) * s;
            count[g] += s;
            for i in off..off + s {
                gg[ch] += gy[i] * ctx.xhat[i];
                gb[ch] += gy[i];
                let d = gy[i] * gamma[ch];
                sum_d[g] += d;
                sum_dx[g] += d * ctx.xhat[i];
            }
        }
    }
    let mut gx = vec![T::zero(); gy.len()];
    for b in 0..n {
        for ch in 0..c {
            let g = ctx.group(b, ch);
            let off = (b * c + ch) * s;
            let is = ctx.inv_std[g];
            if ctx.batch_stats {
                let m = T::of(count[g] as f64);
                for i in off..off + s {
                    let d = gy[i] * gamma[ch];
                    gx[i] = is / m * (m * d - sum_d[g] - ctx.xhat[i] * sum_dx[g]);
                }
            } else {
                for i in off..off + s {
                    gx[i] = gy[i] * gamma[ch] * is;
                }
            }
        }
    }
    NormGrads {
        input: gx,
        gamma: gg,
        beta: gb,
    }
}

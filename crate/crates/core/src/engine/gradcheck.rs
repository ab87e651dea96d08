//! Central-difference gradient verification at 64-bit precision.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Fault, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tol: f64,
    /// Probe at most this many coordinates per registry entry (sampled
    /// without replacement); `None` probes every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tol: 1e-5,
            max_coords: None,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Registry entry and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose finite differences never stabilised because a ReLU
    /// or max-pool kink lies within the smallest step. They are excluded
    /// from `max_rel_err`.
    pub kinks: usize,
    pub pass: bool,
}

/// Largest fraction of probed coordinates that may be written off as kinks.
pub const MAX_KINK_FRACTION: f64 = 0.1;

/// `|a − b| / max(1, |a|, |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Checks the tape gradient of `f` with respect to every trainable entry of
/// `store` against central differences.
pub fn grad_check<F>(store: &mut ParamStore<f64>, mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &mut ParamStore<f64>) -> Result<Var>,
{
    let mut tape = match opts.fault {
        Some(fault) => Tape::with_fault(fault),
        None => Tape::new(),
    };
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| {
            grads
                .param(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(store.value(id).shape().to_vec()))
        })
        .collect();

    let mut eval = |store: &mut ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = f(&mut tape, store)?;
        let out = tape.value(v).data()[0];
        if !out.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(out)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        kinks: 0,
        pass: true,
    };
    for (&id, ga) in ids.iter().zip(&analytic) {
        let len = store.value(id).len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < len => rand::seq::index::sample(&mut rng, len, m).into_vec(),
            _ => (0..len).collect(),
        };
        for i in coords {
            let mut central = |h: f64| -> Result<f64> {
                let orig = store.value(id).data()[i];
                store.get_mut(id).value.data_mut()[i] = orig + h;
                let plus = eval(store);
                store.get_mut(id).value.data_mut()[i] = orig - h;
                let minus = eval(store);
                store.get_mut(id).value.data_mut()[i] = orig;
                Ok((plus? - minus?) / (2.0 * h))
            };
            let g = ga.data()[i];
            let mut err = relative_error(g, central(opts.step)?);
            if err > opts.tol {
                // Retry on finer steps; a smooth neighbourhood shows up as two
                // estimates that agree with each other.
                let fine = central(opts.step / 10.0)?;
                let finer = central(opts.step / 100.0)?;
                if relative_error(fine, finer) > opts.tol {
                    report.checked += 1;
                    report.kinks += 1;
                    continue;
                }
                err = relative_error(g, finer);
            }
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    report.pass = report.max_rel_err <= opts.tol
        && report.kinks as f64 <= MAX_KINK_FRACTION * report.checked as f64;
    Ok(report)
}

/// Single-tensor form: checks `f(point)` with respect to `point`.
pub fn grad_check_fn<F>(mut f: F, point: &Tensor<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let id = store.insert("x", point.clone(), true)?;
    grad_check(
        &mut store,
        |tape, store| {
            let x = tape.param(store, id)?;
            f(tape, x)
        },
        opts,
    )
}

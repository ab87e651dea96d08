//! Factor-2 spatial upsampling.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::real::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    Nearest,
    #[default]
    Trilinear,
}

/// Source taps for one output coordinate along one axis.
#[derive(Clone, Copy, Debug)]
struct Taps {
    lo: usize,
    hi: usize,
    w_lo: f64,
    w_hi: f64,
}

fn axis_taps(extent: usize, mode: UpsampleMode) -> Vec<Taps> {
    (0..2 * extent)
        .map(|o| match mode {
            UpsampleMode::Nearest => Taps {
                lo: o / 2,
                hi: o / 2,
                w_lo: 1.0,
                w_hi: 0.0,
            },
            UpsampleMode::Trilinear => {
                // half-pixel centres, clamped at the low border
                let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
                let lo = (num_traits::Float::floor(src) as usize).min(extent - 1);
                let hi = (lo + 1).min(extent - 1);
                let frac = src - lo as f64;
                Taps {
                    lo,
                    hi,
                    w_lo: 1.0 - frac,
                    w_hi: frac,
                }
            }
        })
        .collect()
}

fn pairs(t: &Taps) -> [(usize, f64); 2] {
    [(t.lo, t.w_lo), (t.hi, t.w_hi)]
}

/// `x` is `outer` contiguous volumes of extent `dims`.
pub fn forward<T: Real>(x: &[T], outer: usize, dims: [usize; 3], mode: UpsampleMode) -> Vec<T> {
    let [d, h, w] = dims;
    let (tz, ty, tx) = (axis_taps(d, mode), axis_taps(h, mode), axis_taps(w, mode));
    let mut y = Vec::with_capacity(outer * 8 * d * h * w);
    for o in 0..outer {
        let base = o * d * h * w;
        for z in &tz {
            for yy in &ty {
                for xx in &tx {
                    let mut acc = T::zero();
                    for (iz, wz) in pairs(z) {
                        for (iy, wy) in pairs(yy) {
                            for (ix, wx) in pairs(xx) {
                                let wgt = wz * wy * wx;
                                if wgt != 0.0 {
                                    acc += T::of(wgt) * x[base + (iz * h + iy) * w + ix];
                                }
                            }
                        }
                    }
                    y.push(acc);
                }
            }
        }
    }
    y
}

pub fn backward<T: Real>(gy: &[T], outer: usize, dims: [usize; 3], mode: UpsampleMode) -> Vec<T> {
    let [d, h, w] = dims;
    let (tz, ty, tx) = (axis_taps(d, mode), axis_taps(h, mode), axis_taps(w, mode));
    let mut gx = vec![T::zero(); outer * d * h * w];
    let mut k = 0;
    for o in 0..outer {
        let base = o * d * h * w;
        for z in &tz {
            for yy in &ty {
                for xx in &tx {
                    let g = gy[k];
                    k += 1;
                    for (iz, wz) in pairs(z) {
                        for (iy, wy) in pairs(yy) {
                            for (ix, wx) in pairs(xx) {
                                let wgt = wz * wy * wx;
                                if wgt != 0.0 {
                                    gx[base + (iz * h + iy) * w + ix] += T::of(wgt) * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub outer: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub output: [usize; 3],
}

impl PoolGeometry {
    pub fn new(shape: &[usize], kernel: [usize; 3], stride: [usize; 3]) -> Result<Self> {
        let &[n, c, d, h, w] = shape else {
            return Err(crate::error::shape_err(
                "maxpool3d",
                format!("expected (N,C,D,H,W), got {shape:?}"),
            ));
        };
        let input = [d, h, w];
        let mut output = [0; 3];
        for a in 0..3 {
            if kernel[a] == 0 || stride[a] == 0 || kernel[a] > input[a] {
                return Err(Error::InvalidExtent {
                    op: "maxpool3d",
                    axis: ["D", "H", "W"][a],
                    detail: format!(
                        "kernel {} / stride {} against input extent {}",
                        kernel[a], stride[a], input[a]
                    ),
                });
            }
            output[a] = (input[a] - kernel[a]) / stride[a] + 1;
        }
        Ok(Self {
            outer: n * c,
            input,
            kernel,
            stride,
            output,
        })
    }
}

/// Window maxima plus the flat input index of each winner; ties keep the
/// first voxel in scan order.
pub fn forward<T: Real>(g: &PoolGeometry, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let len = g.outer * od * oh * ow;
    let mut y = Vec::with_capacity(len);
    let mut arg = Vec::with_capacity(len);
    for o in 0..g.outer {
        let base = o * d * h * w;
        for z in 0..od {
            for yy in 0..oh {
                for xx in 0..ow {
                    let mut best_i = usize::MAX;
                    let mut best = T::neg_infinity();
                    for a in 0..g.kernel[0] {
                        for b in 0..g.kernel[1] {
                            for c in 0..g.kernel[2] {
                                let i = base
                                    + ((z * g.stride[0] + a) * h + yy * g.stride[1] + b) * w
                                    + xx * g.stride[2]
                                    + c;
                                if best_i == usize::MAX || x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    y.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    (y, arg)
}

pub fn backward<T: Real>(input_len: usize, argmax: &[usize], gy: &[T]) -> Vec<T> {
    let mut gx = alloc::vec![T::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(gy) {
        gx[i] += g;
    }
    gx
}

#![allow(dead_code)]

use csunet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-1.0..1.0))
}

pub fn random_tensor_with(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-1.0..1.0))
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y} (tol {tol})");
    }
}

/// Direct nested-loop cross-correlation with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_oracle(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    bias: Option<&[f64]>,
    stride: [usize; 3],
    pad: [usize; 3],
    dil: [usize; 3],
) -> (Vec<f64>, [usize; 5]) {
    let [n, cin, d, h, wd] = xs;
    let [cout, _, kd, kh, kw] = ws;
    let out = |i: usize, e: usize| (e + 2 * pad[i] - dil[i] * (ws[2 + i] - 1) - 1) / stride[i] + 1;
    let (od, oh, ow) = (out(0, d), out(1, h), out(2, wd));
    let mut y = vec![0.0; n * cout * od * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            for z in 0..od {
                for r in 0..oh {
                    for c in 0..ow {
                        let mut acc = bias.map_or(0.0, |bb| bb[co]);
                        for ci in 0..cin {
                            for a in 0..kd {
                                for e in 0..kh {
                                    for f in 0..kw {
                                        let iz = (z * stride[0] + a * dil[0]) as isize - pad[0] as isize;
                                        let iy = (r * stride[1] + e * dil[1]) as isize - pad[1] as isize;
                                        let ix = (c * stride[2] + f * dil[2]) as isize - pad[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (((b * cin + ci) * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                        let wi = (((co * cin + ci) * kd + a) * kh + e) * kw + f;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        y[(((b * cout + co) * od + z) * oh + r) * ow + c] = acc;
                    }
                }
            }
        }
    }
    (y, [n, cout, od, oh, ow])
}

/// A random conv case with extents ≤ 6 and a valid output geometry.
pub struct ConvCase {
    pub x: Tensor<f64>,
    pub w: Tensor<f64>,
    pub b: Tensor<f64>,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub dil: [usize; 3],
}

pub fn random_conv_case(r: &mut ChaCha8Rng) -> ConvCase {
    loop {
        let n = r.gen_range(1..=2);
        let cin = r.gen_range(1..=3);
        let cout = r.gen_range(1..=3);
        let ext: [usize; 3] = [r.gen_range(1..=6), r.gen_range(1..=6), r.gen_range(1..=6)];
        let k: [usize; 3] = [r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=3)];
        let pad: [usize; 3] = [r.gen_range(0..=1), r.gen_range(0..=1), r.gen_range(0..=1)];
        let stride: [usize; 3] = if r.gen_bool(0.5) { [1; 3] } else { [r.gen_range(1..=2), r.gen_range(1..=2), r.gen_range(1..=2)] };
        let dil: [usize; 3] = if r.gen_bool(0.7) { [1; 3] } else { [r.gen_range(1..=2), r.gen_range(1..=2), r.gen_range(1..=2)] };
        let valid = (0..3).all(|i| ext[i] + 2 * pad[i] >= dil[i] * (k[i] - 1) + 1);
        if !valid {
            continue;
        }
        let x = random_tensor_with(&[n, cin, ext[0], ext[1], ext[2]], r);
        let w = random_tensor_with(&[cout, cin, k[0], k[1], k[2]], r);
        let b = random_tensor_with(&[cout], r);
        return ConvCase { x, w, b, stride, pad, dil };
    }
}

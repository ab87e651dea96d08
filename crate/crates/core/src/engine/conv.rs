//! 3D cross-correlation with zero padding.
//!
//! Stride-1 convolutions (every convolution in the network) run over a
//! zero-padded copy of the input laid out on a padded output plane, so each
//! kernel tap becomes a contiguous shifted slice and the inner loops are
//! plain axpy and dot kernels. Columns whose `(y, x)` fall outside the true
//! output are computed and discarded. Other strides use direct loops.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: [1; 3],
            padding: [0; 3],
            dilation: [1; 3],
        }
    }
}

impl ConvSpec {
    pub fn padded(p: usize) -> Self {
        Self {
            padding: [p; 3],
            ..Self::default()
        }
    }
}

const AXES: [&str; 3] = ["D", "H", "W"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub spec: ConvSpec,
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], bias: Option<&[usize]>, spec: ConvSpec) -> Result<Self> {
        let (&[n, cin, d, h, wd], &[cout, wcin, kd, kh, kw]) = (x, w) else {
            return Err(crate::error::shape_err(
                "conv3d",
                format!("expected 5-D input and weight, got {x:?} and {w:?}"),
            ));
        };
        if cin != wcin {
            return Err(crate::error::shape_err(
                "conv3d",
                format!("input has {cin} channels (axis C) but weight expects {wcin}"),
            ));
        }
        if let Some(b) = bias {
            if b != [cout] {
                return Err(crate::error::shape_err(
                    "conv3d",
                    format!("bias shape {b:?}, expected [{cout}]"),
                ));
            }
        }
        let input = [d, h, wd];
        let kernel = [kd, kh, kw];
        let mut output = [0; 3];
        for a in 0..3 {
            if spec.stride[a] == 0 || spec.dilation[a] == 0 || kernel[a] == 0 {
                return Err(Error::InvalidExtent {
                    op: "conv3d",
                    axis: AXES[a],
                    detail: format!("zero stride, dilation or kernel extent: {spec:?}"),
                });
            }
            let span = spec.dilation[a] * (kernel[a] - 1) + 1;
            let padded = input[a] + 2 * spec.padding[a];
            if padded < span {
                return Err(Error::InvalidExtent {
                    op: "conv3d",
                    axis: AXES[a],
                    detail: format!(
                        "padded extent {padded} is smaller than dilated kernel span {span}"
                    ),
                });
            }
            output[a] = (padded - span) / spec.stride[a] + 1;
        }
        Ok(Self {
            batch: n,
            cin,
            cout,
            input,
            kernel,
            output,
            spec,
        })
    }

    pub fn output_shape(&self) -> [usize; 5] {
        let [d, h, w] = self.output;
        [self.batch, self.cout, d, h, w]
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn unit_stride(&self) -> bool {
        self.spec.stride == [1; 3]
    }
}

/// Column block length of the planar kernels.
const BLOCK: usize = 2048;

#[inline(always)]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// Emits `$name`, which runs `$body` compiled with AVX2 enabled when the CPU
/// supports it. The kernels are lane-independent, so both instances produce
/// identical bits.
macro_rules! dispatch {
    ($name:ident, $avx:ident, $body:ident, ($($arg:ident: $ty:ty),*) -> $ret:ty) => {
        fn $name<T: Real>($($arg: $ty),*) -> $ret {
            #[cfg(all(feature = "std", target_arch = "x86_64"))]
            if std::is_x86_feature_detected!("avx2") {
                // SAFETY: AVX2 support was just detected.
                return unsafe { $avx($($arg),*) };
            }
            $body($($arg),*)
        }

        #[cfg(all(feature = "std", target_arch = "x86_64"))]
        #[target_feature(enable = "avx2")]
        fn $avx<T: Real>($($arg: $ty),*) -> $ret {
            $body($($arg),*)
        }
    };
}

dispatch!(planar_columns, planar_columns_avx2, planar_columns_body,
    (g: &ConvGeometry, p: &Plane, xp: &[T], w: &[T], ktot: usize, start: usize, len: usize) -> Vec<T>);
dispatch!(weight_grad_taps, weight_grad_taps_avx2, weight_grad_taps_body,
    (g: &ConvGeometry, p: &Plane, padded: &[Vec<T>], spread: &[Vec<T>], taps: core::ops::Range<usize>) -> Vec<T>);
dispatch!(input_grad_channels, input_grad_channels_avx2, input_grad_channels_body,
    (g: &ConvGeometry, p: &Plane, w: &[T], gyp: &[T], ktot: usize, channels: core::ops::Range<usize>) -> Vec<T>);


/// Layout of a zero-padded input channel on the padded output plane.
struct Plane {
    wp: usize,
    plane: usize,
    cols: usize,
    /// Per-channel stride of the padded buffer, including tail slack so that
    /// every tap offset stays in bounds on the discarded columns.
    stride: usize,
    offsets: Vec<usize>,
}

impl Plane {
    fn new(g: &ConvGeometry) -> Self {
        let [d, h, w] = g.input;
        let [pd, ph, pw] = g.spec.padding;
        let [dd, dh, dw] = g.spec.dilation;
        let [kd, kh, kw] = g.kernel;
        let dp = d + 2 * pd;
        let hp = h + 2 * ph;
        let wp = w + 2 * pw;
        let plane = hp * wp;
        let cols = g.output[0] * plane;
        let slack = (kh - 1) * dh * wp + (kw - 1) * dw;
        let mut offsets = Vec::with_capacity(kd * kh * kw);
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    offsets.push(a * dd * plane + b * dh * wp + c * dw);
                }
            }
        }
        Self {
            wp,
            plane,
            cols,
            stride: dp * plane + slack,
            offsets,
        }
    }

    fn pad_input<T: Real>(&self, g: &ConvGeometry, x: &[T]) -> Vec<T> {
        let [d, h, w] = g.input;
        let [pd, ph, pw] = g.spec.padding;
        let mut out = vec![T::zero(); g.cin * self.stride];
        for c in 0..g.cin {
            for z in 0..d {
                for y in 0..h {
                    let src = ((c * d + z) * h + y) * w;
                    let dst = c * self.stride + (z + pd) * self.plane + (y + ph) * self.wp + pw;
                    out[dst..dst + w].copy_from_slice(&x[src..src + w]);
                }
            }
        }
        out
    }

    fn crop_input<T: Real>(&self, g: &ConvGeometry, padded: &[T], out: &mut [T]) {
        let [d, h, w] = g.input;
        let [pd, ph, pw] = g.spec.padding;
        for c in 0..g.cin {
            for z in 0..d {
                for y in 0..h {
                    let dst = ((c * d + z) * h + y) * w;
                    let src = c * self.stride + (z + pd) * self.plane + (y + ph) * self.wp + pw;
                    out[dst..dst + w].copy_from_slice(&padded[src..src + w]);
                }
            }
        }
    }

    /// Scatters a dense `(C, D', H', W')` gradient onto the padded plane.
    fn spread_output<T: Real>(&self, g: &ConvGeometry, gy: &[T]) -> Vec<T> {
        let [od, oh, ow] = g.output;
        let mut out = vec![T::zero(); g.cout * self.cols];
        for co in 0..g.cout {
            for z in 0..od {
                for y in 0..oh {
                    let src = ((co * od + z) * oh + y) * ow;
                    let dst = co * self.cols + z * self.plane + y * self.wp;
                    out[dst..dst + ow].copy_from_slice(&gy[src..src + ow]);
                }
            }
        }
        out
    }
}

pub fn forward<T: Real>(g: &ConvGeometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let mut y = if g.unit_stride() {
        forward_planar(g, x, w)
    } else {
        forward_direct(g, x, w)
    };
    if let Some(b) = bias {
        let vol = g.out_volume();
        for (i, chunk) in y.chunks_mut(vol).enumerate() {
            let bv = b[i % g.cout];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    y
}

fn forward_planar<T: Real>(g: &ConvGeometry, x: &[T], w: &[T]) -> Vec<T> {
    let p = Plane::new(g);
    let [od, oh, ow] = g.output;
    let in_vol = g.in_volume();
    let out_vol = g.out_volume();
    let ktot = g.taps();
    let mut y = vec![T::zero(); g.batch * g.cout * out_vol];
    for n in 0..g.batch {
        let xp = p.pad_input(g, &x[n * g.cin * in_vol..(n + 1) * g.cin * in_vol]);
        let outp = planar_product(g, &p, &xp, w, ktot);
        let yn = &mut y[n * g.cout * out_vol..(n + 1) * g.cout * out_vol];
        for co in 0..g.cout {
            for z in 0..od {
                for yy in 0..oh {
                    let src = co * p.cols + z * p.plane + yy * p.wp;
                    let dst = ((co * od + z) * oh + yy) * ow;
                    yn[dst..dst + ow].copy_from_slice(&outp[src..src + ow]);
                }
            }
        }
    }
    y
}

/// `out[co, col] = Σ_ci Σ_tap w[co, ci, tap] · xp[ci, col + offset(tap)]` over a column range.
#[inline(always)]
fn planar_columns_body<T: Real>(
    g: &ConvGeometry,
    p: &Plane,
    xp: &[T],
    w: &[T],
    ktot: usize,
    start: usize,
    len: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); g.cout * len];
    let mut s = 0;
    while s < len {
        let n = BLOCK.min(len - s);
        let c0 = start + s;
        for co in 0..g.cout {
            let o = &mut out[co * len + s..co * len + s + n];
            for ci in 0..g.cin {
                let wrow = &w[(co * g.cin + ci) * ktot..(co * g.cin + ci + 1) * ktot];
                let xrow = &xp[ci * p.stride..(ci + 1) * p.stride];
                for (&wv, &off) in wrow.iter().zip(&p.offsets) {
                    axpy(o, wv, &xrow[off + c0..off + c0 + n]);
                }
            }
        }
        s += n;
    }
    out
}

fn planar_product<T: Real>(g: &ConvGeometry, p: &Plane, xp: &[T], w: &[T], ktot: usize) -> Vec<T> {
    let threads = crate::parallel::threads();
    if threads > 1 && p.cols >= 4096 {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            let chunk = p.cols.div_ceil(threads);
            let parts: Vec<(usize, Vec<T>)> = (0..p.cols)
                .step_by(chunk)
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|start| {
                    let len = chunk.min(p.cols - start);
                    (start, planar_columns(g, p, xp, w, ktot, start, len))
                })
                .collect();
            let mut out = vec![T::zero(); g.cout * p.cols];
            for (start, part) in parts {
                let len = part.len() / g.cout;
                for co in 0..g.cout {
                    out[co * p.cols + start..co * p.cols + start + len]
                        .copy_from_slice(&part[co * len..(co + 1) * len]);
                }
            }
            return out;
        }
    }
    planar_columns(g, p, xp, w, ktot, 0, p.cols)
}

fn forward_direct<T: Real>(g: &ConvGeometry, x: &[T], w: &[T]) -> Vec<T> {
    let [d, h, wd] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let [sd, sh, sw] = g.spec.stride;
    let [pd, ph, pw] = g.spec.padding;
    let [dd, dh, dw] = g.spec.dilation;
    let mut y = vec![T::zero(); g.batch * g.cout * g.out_volume()];
    let mut idx = 0;
    for n in 0..g.batch {
        for co in 0..g.cout {
            for z in 0..od {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut acc = T::zero();
                        for ci in 0..g.cin {
                            for a in 0..kd {
                                let Some(iz) = (z * sd + a * dd).checked_sub(pd).filter(|&v| v < d)
                                else {
                                    continue;
                                };
                                for b in 0..kh {
                                    let Some(iy) =
                                        (yy * sh + b * dh).checked_sub(ph).filter(|&v| v < h)
                                    else {
                                        continue;
                                    };
                                    for c in 0..kw {
                                        let Some(ix) =
                                            (xx * sw + c * dw).checked_sub(pw).filter(|&v| v < wd)
                                        else {
                                            continue;
                                        };
                                        let xi = (((n * g.cin + ci) * d + iz) * h + iy) * wd + ix;
                                        let wi = (((co * g.cin + ci) * kd + a) * kh + b) * kw + c;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        y[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    y
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn backward<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    gy: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let (input, weight) = if g.unit_stride() {
        backward_planar(g, x, w, gy, need[0], need[1])
    } else {
        backward_direct(g, x, w, gy, need[0], need[1])
    };
    let bias = need[2].then(|| {
        let vol = g.out_volume();
        let mut gb = vec![T::zero(); g.cout];
        for (i, chunk) in gy.chunks(vol).enumerate() {
            gb[i % g.cout] += chunk.iter().copied().sum::<T>();
        }
        gb
    });
    ConvGrads {
        input,
        weight,
        bias,
    }
}

fn backward_planar<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    gy: &[T],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let p = Plane::new(g);
    let in_vol = g.in_volume();
    let out_vol = g.out_volume();
    let ktot = g.taps();
    let mut gx = need_x.then(|| vec![T::zero(); g.batch * g.cin * in_vol]);
    let mut gw = need_w.then(|| vec![T::zero(); g.cout * g.cin * ktot]);

    let padded: Vec<Vec<T>> = if need_w {
        (0..g.batch)
            .map(|n| p.pad_input(g, &x[n * g.cin * in_vol..(n + 1) * g.cin * in_vol]))
            .collect()
    } else {
        Vec::new()
    };
    let spread: Vec<Vec<T>> = (0..g.batch)
        .map(|n| p.spread_output(g, &gy[n * g.cout * out_vol..(n + 1) * g.cout * out_vol]))
        .collect();

    if let Some(gw) = gw.as_mut() {
        weight_grad(g, &p, &padded, &spread, gw, ktot);
    }
    if let Some(gx) = gx.as_mut() {
        for (n, gyp) in spread.iter().enumerate() {
            let gxp = input_grad(g, &p, w, gyp, ktot);
            p.crop_input(g, &gxp, &mut gx[n * g.cin * in_vol..(n + 1) * g.cin * in_vol]);
        }
    }
    (gx, gw)
}

/// `gw[co, ci, tap] = Σ_n Σ_col gyp[n][co, col] · xp[n][ci, col + off]` for a tap range.
#[inline(always)]
fn weight_grad_taps_body<T: Real>(
    g: &ConvGeometry,
    p: &Plane,
    padded: &[Vec<T>],
    spread: &[Vec<T>],
    taps: core::ops::Range<usize>,
) -> Vec<T> {
    let per_tap = g.cout * g.cin;
    // Keep every output channel's gradient slice of a block resident in L1.
    let block = (4096 / g.cout).clamp(64, BLOCK) / 32 * 32;
    let mut out = vec![T::zero(); per_tap * taps.len()];
    for (xp, gyp) in padded.iter().zip(spread) {
        let mut s = 0;
        while s < p.cols {
            let n = block.min(p.cols - s);
            for ci in 0..g.cin {
                for (slot, tap) in taps.clone().enumerate() {
                    let base = ci * p.stride + p.offsets[tap] + s;
                    let xs = &xp[base..base + n];
                    for co in 0..g.cout {
                        let gr = &gyp[co * p.cols + s..co * p.cols + s + n];
                        out[slot * per_tap + co * g.cin + ci] += T::dot(gr, xs);
                    }
                }
            }
            s += n;
        }
    }
    out
}

fn weight_grad<T: Real>(
    g: &ConvGeometry,
    p: &Plane,
    padded: &[Vec<T>],
    spread: &[Vec<T>],
    gw: &mut [T],
    ktot: usize,
) {
    let threads = crate::parallel::threads();
    let slabs: Vec<(usize, Vec<T>)> = if threads > 1 && ktot > 1 {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            let chunk = ktot.div_ceil(threads);
            (0..ktot)
                .step_by(chunk)
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|s| (s, weight_grad_taps(g, p, padded, spread, s..(s + chunk).min(ktot))))
                .collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            alloc::vec![(0, weight_grad_taps(g, p, padded, spread, 0..ktot))]
        }
    } else {
        alloc::vec![(0, weight_grad_taps(g, p, padded, spread, 0..ktot))]
    };
    let per_tap = g.cout * g.cin;
    for (start, slab) in slabs {
        for (slot, tap_grad) in slab.chunks(per_tap).enumerate() {
            let tap = start + slot;
            for co in 0..g.cout {
                for ci in 0..g.cin {
                    gw[(co * g.cin + ci) * ktot + tap] = tap_grad[co * g.cin + ci];
                }
            }
        }
    }
}

/// `gxp[ci, col + off] += Σ_co w[co, ci, tap] · gyp[co, col]` for an input-channel range.
#[inline(always)]
fn input_grad_channels_body<T: Real>(
    g: &ConvGeometry,
    p: &Plane,
    w: &[T],
    gyp: &[T],
    ktot: usize,
    channels: core::ops::Range<usize>,
) -> Vec<T> {
    let mut out = vec![T::zero(); channels.len() * p.stride];
    let mut s = 0;
    while s < p.cols {
        let n = BLOCK.min(p.cols - s);
        for (slot, ci) in channels.clone().enumerate() {
            let dst = &mut out[slot * p.stride..(slot + 1) * p.stride];
            for (tap, &off) in p.offsets.iter().enumerate() {
                let o = &mut dst[off + s..off + s + n];
                for co in 0..g.cout {
                    axpy(o, w[(co * g.cin + ci) * ktot + tap], &gyp[co * p.cols + s..co * p.cols + s + n]);
                }
            }
        }
        s += n;
    }
    out
}

fn input_grad<T: Real>(g: &ConvGeometry, p: &Plane, w: &[T], gyp: &[T], ktot: usize) -> Vec<T> {
    let threads = crate::parallel::threads();
    if threads > 1 && g.cin > 1 {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            let chunk = g.cin.div_ceil(threads);
            let parts: Vec<Vec<T>> = (0..g.cin)
                .step_by(chunk)
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|s| input_grad_channels(g, p, w, gyp, ktot, s..(s + chunk).min(g.cin)))
                .collect();
            return parts.concat();
        }
    }
    input_grad_channels(g, p, w, gyp, ktot, 0..g.cin)
}

fn backward_direct<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    gy: &[T],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let [d, h, wd] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let [sd, sh, sw] = g.spec.stride;
    let [pd, ph, pw] = g.spec.padding;
    let [dd, dh, dw] = g.spec.dilation;
    let mut gx = vec![T::zero(); if need_x { x.len() } else { 0 }];
    let mut gw = vec![T::zero(); if need_w { w.len() } else { 0 }];
    let mut idx = 0;
    for n in 0..g.batch {
        for co in 0..g.cout {
            for z in 0..od {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let go = gy[idx];
                        idx += 1;
                        for ci in 0..g.cin {
                            for a in 0..kd {
                                let Some(iz) = (z * sd + a * dd).checked_sub(pd).filter(|&v| v < d)
                                else {
                                    continue;
                                };
                                for b in 0..kh {
                                    let Some(iy) =
                                        (yy * sh + b * dh).checked_sub(ph).filter(|&v| v < h)
                                    else {
                                        continue;
                                    };
                                    for c in 0..kw {
                                        let Some(ix) =
                                            (xx * sw + c * dw).checked_sub(pw).filter(|&v| v < wd)
                                        else {
                                            continue;
                                        };
                                        let xi = (((n * g.cin + ci) * d + iz) * h + iy) * wd + ix;
                                        let wi = (((co * g.cin + ci) * kd + a) * kh + b) * kw + c;
                                        if need_x {
                                            gx[xi] += go * w[wi];
                                        }
                                        if need_w {
                                            gw[wi] += go * x[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (need_x.then_some(gx), need_w.then_some(gw))
}

use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of trainable tensors.
///
/// `f32` is the training precision; `f64` is used by gradient checks.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Dot product with a fixed summation order: 32 strided partial sums
    /// reduced pairwise, then the tail.
    #[inline(always)]
    fn dot(a: &[Self], b: &[Self]) -> Self {
        dot_portable(a, b)
    }
}

#[inline(always)]
fn dot_portable<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [[T::zero(); 8]; 4];
    let ca = a.chunks_exact(32);
    let cb = b.chunks_exact(32);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for (k, ak) in acc.iter_mut().enumerate() {
            for i in 0..8 {
                ak[i] = ak[i] + x[8 * k + i] * y[8 * k + i];
            }
        }
    }
    reduce(acc, ra, rb)
}

#[inline(always)]
fn reduce<T: Real>(acc: [[T; 8]; 4], ra: &[T], rb: &[T]) -> T {
    let mut q = [T::zero(); 8];
    for (i, qi) in q.iter_mut().enumerate() {
        *qi = (acc[0][i] + acc[1][i]) + (acc[2][i] + acc[3][i]);
    }
    let mut s = ((q[0] + q[4]) + (q[2] + q[6])) + ((q[1] + q[5]) + (q[3] + q[7]));
    for (x, y) in ra.iter().zip(rb) {
        s = s + *x * *y;
    }
    s
}

#[cfg(all(feature = "std", target_arch = "x86_64"))]
mod avx {
    use core::arch::x86_64::*;

    /// Same lane layout and reduction as `dot_portable`, so results match it bit for bit.
    #[target_feature(enable = "avx")]
    pub(super) fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
        let n = a.len().min(b.len()) / 32 * 32;
        let mut acc = [_mm256_setzero_ps(); 4];
        let mut j = 0;
        while j < n {
            for (k, ak) in acc.iter_mut().enumerate() {
                // SAFETY: `j + 8k + 8 <= n <= len` for both slices.
                unsafe {
                    let x = _mm256_loadu_ps(a.as_ptr().add(j + 8 * k));
                    let y = _mm256_loadu_ps(b.as_ptr().add(j + 8 * k));
                    *ak = _mm256_add_ps(*ak, _mm256_mul_ps(x, y));
                }
            }
            j += 32;
        }
        let mut lanes = [[0f32; 8]; 4];
        for (l, v) in lanes.iter_mut().zip(acc) {
            // SAFETY: `l` holds exactly eight floats.
            unsafe { _mm256_storeu_ps(l.as_mut_ptr(), v) };
        }
        super::reduce(lanes, &a[n..], &b[n..])
    }

    #[target_feature(enable = "avx")]
    pub(super) fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len().min(b.len()) / 32 * 32;
        let mut acc = [_mm256_setzero_pd(); 8];
        let mut j = 0;
        while j < n {
            for (k, ak) in acc.iter_mut().enumerate() {
                // SAFETY: `j + 4k + 4 <= n <= len` for both slices.
                unsafe {
                    let x = _mm256_loadu_pd(a.as_ptr().add(j + 4 * k));
                    let y = _mm256_loadu_pd(b.as_ptr().add(j + 4 * k));
                    *ak = _mm256_add_pd(*ak, _mm256_mul_pd(x, y));
                }
            }
            j += 32;
        }
        let mut lanes = [[0f64; 8]; 4];
        for (k, v) in acc.into_iter().enumerate() {
            // SAFETY: each half of an eight-lane row holds four doubles.
            unsafe { _mm256_storeu_pd(lanes[k / 2].as_mut_ptr().add(4 * (k % 2)), v) };
        }
        super::reduce(lanes, &a[n..], &b[n..])
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn dot(a: &[f32], b: &[f32]) -> f32 {
        #[cfg(all(feature = "std", target_arch = "x86_64"))]
        if std::is_x86_feature_detected!("avx") {
            // SAFETY: AVX support was just detected.
            return unsafe { avx::dot_f32(a, b) };
        }
        dot_portable(a, b)
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn dot(a: &[f64], b: &[f64]) -> f64 {
        #[cfg(all(feature = "std", target_arch = "x86_64"))]
        if std::is_x86_feature_detected!("avx") {
            // SAFETY: AVX support was just detected.
            return unsafe { avx::dot_f64(a, b) };
        }
        dot_portable(a, b)
    }
}

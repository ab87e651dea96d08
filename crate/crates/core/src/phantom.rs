//! Synthetic nodule phantoms: a noisy background with one bright sphere.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SOLID_CONTRAST: f64 = 0.8;
pub const GROUND_GLASS_CONTRAST: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub extent: usize,
    pub nodule_radius_vox: f64,
    /// Sphere centre in voxel coordinates `(d, h, w)`; drawn from the seed
    /// when absent.
    pub nodule_center: Option<[f64; 3]>,
    pub contrast: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            extent: 64,
            nodule_radius_vox: 6.0,
            nodule_center: None,
            contrast: SOLID_CONTRAST,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let r = self.nodule_radius_vox;
        if !(r >= 2.0 && r <= self.extent as f64 / 4.0) {
            return Err(Error::InvalidConfig(format!(
                "nodule radius {r} outside [2, {}]",
                self.extent as f64 / 4.0
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite() && self.contrast.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise sigma {} / contrast {} must be finite, sigma >= 0",
                self.noise_sigma, self.contrast
            )));
        }
        if let Some(c) = self.nodule_center {
            let hi = (self.extent - 1) as f64;
            if c.iter().any(|&x| !(x - r >= 0.0 && x + r <= hi)) {
                return Err(Error::PhantomOutOfBounds(format!(
                    "centre {c:?} with radius {r} in a {}^3 volume",
                    self.extent
                )));
            }
        }
        Ok(())
    }
}

/// A generated image `(1,E,E,E)`, its mask and the centre actually used.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: Tensor<f32>,
    pub mask: Tensor<u8>,
    pub center: [f64; 3],
}

/// Intensity weight of a voxel at `dist` from the centre: 1 inside, 0
/// outside, a half-cosine across the one-voxel rim around the radius.
pub fn rim_weight(dist: f64, radius: f64) -> f64 {
    let inner = radius - 0.5;
    if dist <= inner {
        1.0
    } else if dist >= radius + 0.5 {
        0.0
    } else {
        0.5 * (1.0 + Float::cos(core::f64::consts::PI * (dist - inner)))
    }
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let e = spec.extent;
    let r = spec.nodule_radius_vox;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let center = match spec.nodule_center {
        Some(c) => c,
        None => {
            let hi = (e - 1) as f64 - r;
            [0; 3].map(|_| rng.gen_range(r..=hi))
        }
    };
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|err| Error::InvalidConfig(format!("noise sigma: {err}")))?;
    let mut image = Vec::with_capacity(e * e * e);
    let mut mask = vec![0u8; e * e * e];
    for d in 0..e {
        for h in 0..e {
            for w in 0..e {
                let dist = {
                    let [cd, ch, cw] = center;
                    let (a, b, c) = (d as f64 - cd, h as f64 - ch, w as f64 - cw);
                    Float::sqrt(a * a + b * b + c * c)
                };
                let i = (d * e + h) * e + w;
                if dist <= r {
                    mask[i] = 1;
                }
                let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                image.push((spec.contrast * rim_weight(dist, r) + n) as f32);
            }
        }
    }
    Ok(Phantom {
        image: Tensor::new(vec![1, e, e, e], image)?,
        mask: Tensor::new(vec![1, e, e, e], mask)?,
        center,
    })
}

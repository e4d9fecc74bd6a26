//! Smooth synthetic phase for magnitude-only images.
//!
//! This is a stand-in construction: white Gaussian noise is low-pass
//! filtered in k-space with `exp(-(f / sigma_f)^2 / 2)`, where
//! `sigma_f = N / (2 pi smoothness_sigma)` per axis, and the real part is
//! rescaled linearly so its minimum maps to `-phase_range` and its maximum to
//! `+phase_range`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::{ComplexImage, Fft2Plan, RealImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseParams {
    /// Spatial scale of the phase variation, in pixels.
    pub smoothness_sigma: f64,
    /// Phase values span `[-phase_range, phase_range]`, radians.
    pub phase_range: f64,
    pub seed: u64,
}

impl Default for PhaseParams {
    fn default() -> Self {
        Self {
            smoothness_sigma: 16.0,
            phase_range: std::f64::consts::PI,
            seed: 0,
        }
    }
}

impl PhaseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothness_sigma.is_finite() && self.smoothness_sigma > 0.0) {
            return Err(Error::Config(format!(
                "smoothness_sigma must be positive, got {}",
                self.smoothness_sigma
            )));
        }
        if !(self.phase_range > 0.0 && self.phase_range <= std::f64::consts::PI) {
            return Err(Error::Config(format!(
                "phase_range must lie in (0, pi], got {}",
                self.phase_range
            )));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// FNV-1a (64-bit) of the identifier, XORed into the base seed.
pub fn derive_seed(base: u64, id: &str) -> u64 {
    use std::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    h.write(id.as_bytes());
    base ^ h.finish()
}

/// The phase map in radians, row-major.
pub fn phase_map(height: usize, width: usize, params: &PhaseParams) -> Result<Vec<f64>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut buf: Vec<Complex<f64>> = (0..height * width)
        .map(|_| Complex::new(StandardNormal.sample(&mut rng), 0.0))
        .collect();

    let plan = Fft2Plan::<f64>::new(height, width);
    plan.forward(&mut buf);
    let two_pi = 2.0 * std::f64::consts::PI;
    let sigma_fy = height as f64 / (two_pi * params.smoothness_sigma);
    let sigma_fx = width as f64 / (two_pi * params.smoothness_sigma);
    let (cy, cx) = ((height / 2) as f64, (width / 2) as f64);
    for r in 0..height {
        let fy = (r as f64 - cy) / sigma_fy;
        for c in 0..width {
            let fx = (c as f64 - cx) / sigma_fx;
            buf[r * width + c] *= (-0.5 * (fy * fy + fx * fx)).exp();
        }
    }
    plan.inverse(&mut buf);

    let (lo, hi) = buf
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.re), hi.max(v.re))
        });
    let span = hi - lo;
    let range = params.phase_range;
    Ok(buf
        .iter()
        .map(|v| {
            if span > 0.0 {
                (-range + 2.0 * range * (v.re - lo) / span).clamp(-range, range)
            } else {
                0.0
            }
        })
        .collect())
}

/// Attaches a smooth synthetic phase to a magnitude image in `[0, 1]`.
pub fn synthesize_phase(magnitude: &RealImage, params: &PhaseParams) -> Result<ComplexImage> {
    if magnitude.data().iter().any(|&m| !(0.0..=1.0).contains(&m)) {
        return Err(Error::InvalidInput("magnitude values must lie in [0, 1]".into()));
    }
    let (h, w) = magnitude.shape();
    let phi = phase_map(h, w, params)?;
    let (re, im) = magnitude
        .data()
        .iter()
        .zip(&phi)
        .map(|(&m, &p)| ((m * p.cos()) as f32, (m * p.sin()) as f32))
        .unzip();
    ComplexImage::new(h, w, re, im)
}

/// Mean absolute forward difference of the phase over both axes.
pub fn mean_phase_gradient(phi: &[f64], height: usize, width: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..height {
        for c in 0..width {
            let v = phi[r * width + c];
            if c + 1 < width {
                total += (phi[r * width + c + 1] - v).abs();
                count += 1;
            }
            if r + 1 < height {
                total += (phi[(r + 1) * width + c] - v).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

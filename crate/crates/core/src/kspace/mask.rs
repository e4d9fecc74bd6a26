//! Gaussian variable-density Cartesian sampling masks.
//!
//! A fully sampled band around DC is always acquired; the remaining budget
//! is filled by sequential weighted draws without replacement, with weight
//! `exp(-d^2 / (2 sigma^2))` where `d` is the distance from DC normalised by
//! the half-width of the axis (so `sigma` is a fraction of the half-width).
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`);
//! each draw consumes one `f64` sample in `[0, 1)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MaskMode {
    /// Whole phase-encode lines (columns) are sampled.
    #[default]
    #[serde(rename = "lines-1d")]
    Lines1d,
    /// Individual k-space points are sampled.
    #[serde(rename = "points-2d")]
    Points2d,
}

impl MaskMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskMode::Lines1d => "lines-1d",
            MaskMode::Points2d => "points-2d",
        }
    }
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lines-1d" => Ok(MaskMode::Lines1d),
            "points-2d" => Ok(MaskMode::Points2d),
            other => Err(Error::Config(format!("unknown mask mode '{other}'"))),
        }
    }
}

/// Arguments of [`generate_mask`] other than the image shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskParams {
    pub acceleration: f64,
    pub center_fraction: f64,
    pub sigma: f64,
    pub mode: MaskMode,
    pub seed: u64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            acceleration: 4.0,
            center_fraction: 0.08,
            sigma: 0.25,
            mode: MaskMode::Lines1d,
            seed: 0,
        }
    }
}

impl MaskParams {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    height: usize,
    width: usize,
    sampled: Vec<bool>,
    params: MaskParams,
}

impl SamplingMask {
    /// Builds a mask from an explicit sampling plane. Used by the container
    /// reader; no density constraint is checked here.
    pub fn from_parts(height: usize, width: usize, sampled: Vec<bool>, params: MaskParams) -> Result<Self> {
        if sampled.len() != height * width || height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "mask plane of length {} does not match {height}x{width}",
                sampled.len()
            )));
        }
        Ok(Self {
            height,
            width,
            sampled,
            params,
        })
    }

    /// Every k-space location sampled (acceleration 1).
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            sampled: vec![true; height * width],
            params: MaskParams {
                acceleration: 1.0,
                ..MaskParams::default()
            },
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn sampled(&self) -> &[bool] {
        &self.sampled
    }

    pub fn params(&self) -> &MaskParams {
        &self.params
    }

    pub fn acceleration(&self) -> f64 {
        self.params.acceleration
    }

    pub fn center_fraction(&self) -> f64 {
        self.params.center_fraction
    }

    pub fn mode(&self) -> MaskMode {
        self.params.mode
    }

    pub fn seed(&self) -> u64 {
        self.params.seed
    }

    pub fn is_sampled(&self, row: usize, col: usize) -> bool {
        self.sampled[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.sampled.iter().filter(|&&s| s).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.sampled.len() as f64
    }

    /// Indices of sampled phase-encode columns (meaningful in lines mode).
    pub fn sampled_columns(&self) -> Vec<usize> {
        (0..self.width)
            .filter(|&c| (0..self.height).all(|r| self.is_sampled(r, c)))
            .collect()
    }
}

fn center_band(n: usize, fraction: f64) -> std::ops::Range<usize> {
    let count = (fraction * n as f64).round() as usize;
    let start = (n / 2).saturating_sub(count / 2);
    start..(start + count).min(n)
}

/// Sum tree over candidate weights supporting weighted selection with removal.
struct Fenwick {
    tree: Vec<f64>,
    weights: Vec<f64>,
}

impl Fenwick {
    fn new(weights: Vec<f64>) -> Self {
        let n = weights.len();
        let mut tree = vec![0.0; n + 1];
        for (i, &w) in weights.iter().enumerate() {
            let mut j = i + 1;
            while j <= n {
                tree[j] += w;
                j += j & j.wrapping_neg();
            }
        }
        Self { tree, weights }
    }

    fn total(&self) -> f64 {
        let mut j = self.weights.len();
        let mut s = 0.0;
        while j > 0 {
            s += self.tree[j];
            j -= j & j.wrapping_neg();
        }
        s
    }

    fn remove(&mut self, i: usize) {
        let w = self.weights[i];
        self.weights[i] = 0.0;
        let n = self.weights.len();
        let mut j = i + 1;
        while j <= n {
            self.tree[j] -= w;
            j += j & j.wrapping_neg();
        }
    }

    /// First index whose cumulative weight exceeds `target`.
    fn find(&self, mut target: f64) -> usize {
        let n = self.weights.len();
        let mut pos = 0;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= target {
                pos = next;
                target -= self.tree[next];
            }
            step >>= 1;
        }
        // Rounding in the tree can land on an already removed slot.
        let mut idx = pos.min(n - 1);
        if self.weights[idx] == 0.0 {
            if let Some(j) = (idx..n).chain(0..idx).find(|&j| self.weights[j] > 0.0) {
                idx = j;
            }
        }
        idx
    }
}

/// Draws `k` distinct indices with probability proportional to `weights`,
/// one at a time, removing each winner before the next draw.
fn weighted_draws(weights: Vec<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut tree = Fenwick::new(weights);
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let total = tree.total();
        let u: f64 = rng.random();
        let idx = tree.find(u * total);
        tree.remove(idx);
        picked.push(idx);
    }
    picked
}

fn gaussian_weight(d2: f64, sigma: f64) -> f64 {
    // Floor keeps far-out candidates drawable when the budget demands it.
    (-d2 / (2.0 * sigma * sigma)).exp().max(1e-300)
}

pub fn generate_mask(height: usize, width: usize, params: &MaskParams) -> Result<SamplingMask> {
    if height == 0 || width == 0 {
        return Err(Error::Config(format!(
            "mask dimensions must be positive, got {height}x{width}"
        )));
    }
    if !params.acceleration.is_finite() || params.acceleration < 1.0 {
        return Err(Error::Config(format!(
            "acceleration must be >= 1, got {}",
            params.acceleration
        )));
    }
    if !(0.0..=1.0).contains(&params.center_fraction) {
        return Err(Error::Config(format!(
            "center_fraction must lie in [0, 1], got {}",
            params.center_fraction
        )));
    }
    if !(params.sigma.is_finite() && params.sigma > 0.0) {
        return Err(Error::Config(format!(
            "sigma must be positive, got {}",
            params.sigma
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut sampled = vec![false; height * width];

    match params.mode {
        MaskMode::Lines1d => {
            let budget = (width as f64 / params.acceleration).round() as usize;
            let center = center_band(width, params.center_fraction);
            if center.len() > budget {
                return Err(Error::Config(format!(
                    "center band of {} lines exceeds the budget of {budget} lines",
                    center.len()
                )));
            }
            let half = width as f64 / 2.0;
            let dc = (width / 2) as f64;
            let candidates: Vec<usize> = (0..width).filter(|c| !center.contains(c)).collect();
            let weights = candidates
                .iter()
                .map(|&c| gaussian_weight(((c as f64 - dc) / half).powi(2), params.sigma))
                .collect();
            let mut lines: Vec<usize> = center.clone().collect();
            lines.extend(
                weighted_draws(weights, budget - center.len(), &mut rng)
                    .into_iter()
                    .map(|i| candidates[i]),
            );
            for c in lines {
                for r in 0..height {
                    sampled[r * width + c] = true;
                }
            }
        }
        MaskMode::Points2d => {
            let budget = ((height * width) as f64 / params.acceleration).round() as usize;
            let rows = center_band(height, params.center_fraction);
            let cols = center_band(width, params.center_fraction);
            let n_center = rows.len() * cols.len();
            if n_center > budget {
                return Err(Error::Config(format!(
                    "center block of {n_center} points exceeds the budget of {budget} points"
                )));
            }
            let (hh, hw) = (height as f64 / 2.0, width as f64 / 2.0);
            let (dr0, dc0) = ((height / 2) as f64, (width / 2) as f64);
            let mut candidates = Vec::with_capacity(height * width - n_center);
            let mut weights = Vec::with_capacity(height * width - n_center);
            for r in 0..height {
                for c in 0..width {
                    if rows.contains(&r) && cols.contains(&c) {
                        sampled[r * width + c] = true;
                        continue;
                    }
                    let d2 = ((r as f64 - dr0) / hh).powi(2) + ((c as f64 - dc0) / hw).powi(2);
                    candidates.push(r * width + c);
                    weights.push(gaussian_weight(d2, params.sigma));
                }
            }
            for i in weighted_draws(weights, budget - n_center, &mut rng) {
                sampled[candidates[i]] = true;
            }
        }
    }

    Ok(SamplingMask {
        height,
        width,
        sampled,
        params: *params,
    })
}

//! PSNR and SSIM on magnitude images.

use crate::error::{Error, Result};
use crate::kspace::RealImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &RealImage, b: &RealImage) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            expected: a.shape(),
            actual: b.shape(),
        });
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)` with `peak = max(reference)`. Identical images
/// give `f64::INFINITY`.
pub fn psnr(reference: &RealImage, test: &RealImage) -> Result<f64> {
    check_shapes(reference, test)?;
    let peak = reference.max();
    if peak <= 0.0 {
        return Err(Error::InvalidInput(
            "PSNR reference must have a positive maximum".into(),
        ));
    }
    let mse = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(&a, &b)| {
            let d = a - b;
            d * d
        })
        .sum::<f64>()
        / reference.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Normalised 1D Gaussian taps of the SSIM window.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering: output is `(h - k + 1) x (w - k + 1)`.
fn filter_valid(data: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let src = &data[r * w..(r + 1) * w];
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().zip(&src[c..c + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(r + i) * ow + c])
                .sum();
        }
    }
    out
}

pub(crate) fn ssim_terms(mu_x: f64, mu_y: f64, xx: f64, yy: f64, xy: f64, c1: f64, c2: f64) -> f64 {
    let var_x = xx - mu_x * mu_x;
    let var_y = yy - mu_y * mu_y;
    let cov = xy - mu_x * mu_y;
    ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)) / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2))
}

/// Mean structural similarity over all fully contained 11x11 Gaussian
/// windows (sigma 1.5), with `K1 = 0.01`, `K2 = 0.03` and dynamic range
/// `max(reference)`.
pub fn ssim(reference: &RealImage, test: &RealImage) -> Result<f64> {
    check_shapes(reference, test)?;
    let (h, w) = reference.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let range = reference.max();
    if range <= 0.0 {
        return Err(Error::InvalidInput(
            "SSIM reference must have a positive maximum".into(),
        ));
    }
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let x: Vec<f64> = reference.data().to_vec();
    let y: Vec<f64> = test.data().to_vec();
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);

    let product = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
    let mu_x = filter_valid(&x, h, w, &taps);
    let mu_y = filter_valid(&y, h, w, &taps);
    let xx = filter_valid(&product(&x, &x), h, w, &taps);
    let yy = filter_valid(&product(&y, &y), h, w, &taps);
    let xy = filter_valid(&product(&x, &y), h, w, &taps);

    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| ssim_terms(mu_x[i], mu_y[i], xx[i], yy[i], xy[i], c1, c2))
        .sum();
    Ok(total / n as f64)
}

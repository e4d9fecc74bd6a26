//! Centered, orthonormal 2D DFT.
//!
//! `fft2c(x) = fftshift(F(ifftshift(x))) / sqrt(H*W)`, so the DC coefficient
//! sits at `(H/2, W/2)` and the transform is unitary.

use std::sync::Arc;

use num_traits::Float;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftNum, FftPlanner};

use super::image::ComplexImage;
use crate::error::{Error, Result};

/// Reusable row/column plans for one image shape.
pub struct Fft2Plan<T: FftNum> {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: FftNum + Float> Fft2Plan<T> {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn forward(&self, buf: &mut [Complex<T>]) {
        self.transform(buf, false);
    }

    pub fn inverse(&self, buf: &mut [Complex<T>]) {
        self.transform(buf, true);
    }

    fn transform(&self, buf: &mut [Complex<T>], inverse: bool) {
        let (h, w) = (self.height, self.width);
        assert_eq!(buf.len(), h * w, "buffer does not match plan shape");

        let mut scratch = ifftshift(buf, h, w);
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        row.process(&mut scratch);

        let mut transposed = vec![Complex::new(T::zero(), T::zero()); h * w];
        transpose(&scratch, &mut transposed, h, w);
        col.process(&mut transposed);
        transpose(&transposed, &mut scratch, w, h);

        let scale = T::one() / T::from(h * w).unwrap().sqrt();
        for v in scratch.iter_mut() {
            *v = *v * scale;
        }
        fftshift_into(&scratch, buf, h, w);
    }
}

fn transpose<T: Copy>(src: &[T], dst: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

fn ifftshift<T: Copy>(src: &[T], h: usize, w: usize) -> Vec<T> {
    let (sh, sw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let sr = (r + sh) % h;
        for c in 0..w {
            out.push(src[sr * w + (c + sw) % w]);
        }
    }
    out
}

fn fftshift_into<T: Copy>(src: &[T], dst: &mut [T], h: usize, w: usize) {
    let (sh, sw) = (h / 2, w / 2);
    for r in 0..h {
        let dr = (r + sh) % h;
        for c in 0..w {
            dst[dr * w + (c + sw) % w] = src[r * w + c];
        }
    }
}

fn transform_image(img: &ComplexImage, inverse: bool) -> Result<ComplexImage> {
    if img.real().iter().chain(img.imag()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fft input".into()));
    }
    let (h, w) = img.shape();
    let plan = Fft2Plan::<f64>::new(h, w);
    let mut buf = img.to_complex();
    plan.transform(&mut buf, inverse);
    ComplexImage::from_complex(h, w, &buf)
}

/// Centered orthonormal forward transform (image → k-space).
pub fn fft2c(img: &ComplexImage) -> Result<ComplexImage> {
    transform_image(img, false)
}

/// Centered orthonormal inverse transform (k-space → image).
pub fn ifft2c(ksp: &ComplexImage) -> Result<ComplexImage> {
    transform_image(ksp, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let re = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let im = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        ComplexImage::new(h, w, re, im).unwrap()
    }

    #[test]
    fn constant_image_maps_to_center_impulse() {
        let img = ComplexImage::from_real(8, 8, vec![1.0; 64]).unwrap();
        let k = fft2c(&img).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let v = k.get(r, c);
                if (r, c) == (4, 4) {
                    assert!((v.re - 8.0).abs() < 1e-5 && v.im.abs() < 1e-5);
                } else {
                    assert!(v.norm() < 1e-5, "({r},{c}) = {v}");
                }
            }
        }
    }

    #[test]
    fn center_impulse_maps_to_constant() {
        let mut re = vec![0.0; 64];
        re[4 * 8 + 4] = 8.0;
        let k = ComplexImage::from_real(8, 8, re).unwrap();
        let img = ifft2c(&k).unwrap();
        for (a, b) in img.real().iter().zip(img.imag()) {
            assert!((a - 1.0).abs() < 1e-6 && b.abs() < 1e-6);
        }
    }

    #[test]
    fn odd_shapes_round_trip() {
        for &(h, w) in &[(5, 7), (9, 4), (1, 3)] {
            let x = random_image(h, w, 3);
            let y = ifft2c(&fft2c(&x).unwrap()).unwrap();
            assert!(y.sub(&x).unwrap().max_abs() <= 1e-5 * x.max_abs());
        }
    }

    #[test]
    fn odd_shape_dc_at_center() {
        let img = ComplexImage::from_real(5, 7, vec![1.0; 35]).unwrap();
        let k = fft2c(&img).unwrap();
        let dc = k.get(2, 3);
        assert!((dc.re - 35f32.sqrt()).abs() < 1e-5);
    }

    #[test]
    fn linearity_of_inverse() {
        let a = random_image(16, 16, 1);
        let b = random_image(16, 16, 2);
        let lhs = ifft2c(&a.add(&b).unwrap()).unwrap();
        let rhs = ifft2c(&a).unwrap().add(&ifft2c(&b).unwrap()).unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-5);
    }

    #[test]
    fn f32_plan_matches_f64_plan() {
        let x = random_image(12, 10, 9);
        let mut b64 = x.to_complex();
        Fft2Plan::<f64>::new(12, 10).forward(&mut b64);
        let mut b32: Vec<Complex<f32>> = x
            .real()
            .iter()
            .zip(x.imag())
            .map(|(&r, &i)| Complex::new(r, i))
            .collect();
        Fft2Plan::<f32>::new(12, 10).forward(&mut b32);
        for (a, b) in b64.iter().zip(&b32) {
            assert!((a.re - b.re as f64).abs() < 1e-5 && (a.im - b.im as f64).abs() < 1e-5);
        }
    }
}

//! Deep cascade of CNNs with interleaved data-consistency layers.
//!
//! Each cascade computes `x_c = DC(x_{c-1} + block_c(x_{c-1}))`, where a
//! block is a stack of same-padded convolutions over the two real channels
//! (real, imaginary) with ReLU after every convolution but the last. The
//! last convolution of every block starts at zero, so a fresh model is the
//! identity followed by data consistency.

pub mod checkpoint;
mod engine;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

pub use engine::Scalar;
use engine::{mse_with_grad, Engine, Layout, Measurement};

use crate::error::{Error, Result};
use crate::kspace::{ComplexImage, DcWeight, SamplingMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeConfig {
    pub n_cascades: usize,
    pub n_conv_per_block: usize,
    pub n_filters: usize,
    pub kernel_size: usize,
    pub dc_lambda: DcWeight,
    pub input_channels: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            n_cascades: 5,
            n_conv_per_block: 5,
            n_filters: 48,
            kernel_size: 3,
            dc_lambda: DcWeight::HARD,
            input_channels: 2,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cascades < 1 {
            return Err(Error::Config("n_cascades must be >= 1".into()));
        }
        if self.n_conv_per_block < 2 {
            return Err(Error::Config("n_conv_per_block must be >= 2".into()));
        }
        if self.n_filters < 1 {
            return Err(Error::Config("n_filters must be >= 1".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.input_channels != 2 {
            return Err(Error::Config(format!(
                "input_channels is fixed at 2, got {}",
                self.input_channels
            )));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        Layout::new(self).total
    }
}

/// Inputs of one reconstruction problem, prepared for the engine.
pub struct Problem {
    height: usize,
    width: usize,
    zero_filled: Vec<f32>,
    kspace: Vec<Complex<f32>>,
    sampled: Vec<bool>,
}

impl Problem {
    pub fn new(zero_filled: &ComplexImage, kspace_us: &ComplexImage, mask: &SamplingMask) -> Result<Self> {
        zero_filled.check_same_shape(kspace_us)?;
        if zero_filled.shape() != mask.shape() {
            return Err(Error::Shape {
                expected: zero_filled.shape(),
                actual: mask.shape(),
            });
        }
        let (height, width) = zero_filled.shape();
        Ok(Self {
            height,
            width,
            zero_filled: channels(zero_filled),
            kspace: kspace_us
                .real()
                .iter()
                .zip(kspace_us.imag())
                .map(|(&re, &im)| Complex::new(re, im))
                .collect(),
            sampled: mask.sampled().to_vec(),
        })
    }

    fn measurement<T: Scalar>(&self) -> Measurement<T> {
        Measurement {
            kspace: self
                .kspace
                .iter()
                .map(|c| Complex::new(T::from(c.re).unwrap(), T::from(c.im).unwrap()))
                .collect(),
            sampled: self.sampled.clone(),
        }
    }

    fn input<T: Scalar>(&self) -> Vec<T> {
        self.zero_filled.iter().map(|&v| T::from(v).unwrap()).collect()
    }
}

fn channels(img: &ComplexImage) -> Vec<f32> {
    let mut out = Vec::with_capacity(2 * img.len());
    out.extend_from_slice(img.real());
    out.extend_from_slice(img.imag());
    out
}

fn image_from_channels(h: usize, w: usize, x: &[f32]) -> Result<ComplexImage> {
    let hw = h * w;
    ComplexImage::new(h, w, x[..hw].to_vec(), x[hw..].to_vec())
}

/// A cascade network: configuration plus a flat `f32` parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    config: CascadeConfig,
    layout: Layout,
    params: Vec<f32>,
}

impl CascadeModel {
    /// He-normal weights, zero biases, zero final convolution per block.
    pub fn init(config: CascadeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0f32; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in &layout.blocks {
            let last = block.len() - 1;
            for layer in &block[..last] {
                let std = (2.0 / layer.patch_len() as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                for p in &mut params[layer.weight_offset..layer.weight_offset + layer.weight_len()] {
                    *p = normal.sample(&mut rng) as f32;
                }
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_parameters(config: CascadeConfig, params: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &CascadeConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[f32] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    /// Index range of the final convolution's weights and bias in block `c`.
    pub fn final_layer_range(&self, cascade: usize) -> std::ops::Range<usize> {
        let layer = self.layout.blocks[cascade].last().expect("non-empty block");
        layer.weight_offset..layer.bias_offset + layer.c_out
    }

    fn check_problem(&self, p: &Problem) -> Result<()> {
        let k = self.config.kernel_size;
        if p.height < k || p.width < k {
            return Err(Error::InvalidInput(format!(
                "image {}x{} smaller than kernel {k}",
                p.height, p.width
            )));
        }
        Ok(())
    }

    fn engine<'a, T: Scalar>(&'a self, params: &'a [T], p: &Problem) -> Engine<'a, T> {
        Engine::new(
            &self.layout,
            params,
            p.height,
            p.width,
            self.config.dc_lambda.keep_fraction(),
        )
    }

    pub fn forward_problem(&self, p: &Problem) -> Result<ComplexImage> {
        self.check_problem(p)?;
        if self.config.dc_lambda.is_hard() && p.sampled.iter().all(|&s| s) {
            // Hard DC with every coefficient measured returns the measurement.
            return image_from_channels(p.height, p.width, &p.zero_filled);
        }
        let engine = self.engine(&self.params, p);
        let (out, _) = engine.forward(&p.input::<f32>(), &p.measurement(), false)?;
        image_from_channels(p.height, p.width, &out)
    }

    /// Reconstruction from a zero-filled image and its measured k-space.
    pub fn forward(
        &self,
        zero_filled: &ComplexImage,
        kspace_us: &ComplexImage,
        mask: &SamplingMask,
    ) -> Result<ComplexImage> {
        self.forward_problem(&Problem::new(zero_filled, kspace_us, mask)?)
    }

    /// Loss against `gt` and its gradient with respect to every parameter.
    pub fn loss_and_gradient(&self, p: &Problem, gt: &ComplexImage) -> Result<(f64, Vec<f32>)> {
        self.check_problem(p)?;
        if gt.shape() != (p.height, p.width) {
            return Err(Error::Shape {
                expected: (p.height, p.width),
                actual: gt.shape(),
            });
        }
        let engine = self.engine(&self.params, p);
        let meas = p.measurement();
        let (out, tape) = engine.forward(&p.input::<f32>(), &meas, true)?;
        let (loss, grad_out) = mse_with_grad(&out, &channels(gt), p.height * p.width);
        let grad = engine.backward(&tape.expect("tape recorded"), &grad_out, &meas);
        Ok((loss as f64, grad))
    }

    /// Batch-mean loss and gradient. Per-sample work may run in parallel;
    /// the reduction is in sample order, so the result does not depend on
    /// the thread count.
    pub fn batch_loss_and_gradient(&self, batch: &[(&Problem, &ComplexImage)]) -> Result<(f64, Vec<f32>)> {
        let parts: Vec<(f64, Vec<f32>)> = batch
            .par_iter()
            .map(|(p, gt)| self.loss_and_gradient(p, gt))
            .collect::<Result<_>>()?;
        let n = parts.len().max(1) as f32;
        let mut grad = vec![0.0f32; self.params.len()];
        let mut loss = 0.0;
        for (l, g) in &parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        for g in grad.iter_mut() {
            *g /= n;
        }
        Ok((loss / parts.len().max(1) as f64, grad))
    }

    /// Loss evaluated in an arbitrary scalar type with explicit parameters.
    /// Used for finite-difference checks in double precision.
    pub fn loss_with_parameters<T: Scalar>(&self, params: &[T], p: &Problem, gt: &ComplexImage) -> Result<T> {
        self.check_problem(p)?;
        if params.len() != self.params.len() {
            return Err(Error::InvalidInput("parameter vector length mismatch".into()));
        }
        let engine = self.engine(params, p);
        let (out, _) = engine.forward(&p.input::<T>(), &p.measurement(), false)?;
        let target: Vec<T> = channels(gt).iter().map(|&v| T::from(v).unwrap()).collect();
        Ok(mse_with_grad(&out, &target, p.height * p.width).0)
    }
}

/// Mean over pixels of `|pred - gt|^2`.
pub fn loss(pred: &ComplexImage, gt: &ComplexImage) -> Result<f64> {
    pred.check_same_shape(gt)?;
    let sum: f64 = pred
        .real()
        .iter()
        .zip(gt.real())
        .chain(pred.imag().iter().zip(gt.imag()))
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::{fft2c, generate_mask, undersample, MaskParams};
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let re = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let im = (0..h * w).map(|_| rng.random_range(-0.3..0.3)).collect();
        ComplexImage::new(h, w, re, im).unwrap()
    }

    fn small_config() -> CascadeConfig {
        CascadeConfig {
            n_cascades: 2,
            n_conv_per_block: 3,
            n_filters: 8,
            ..CascadeConfig::default()
        }
    }

    fn setup(h: usize, w: usize, seed: u64) -> (ComplexImage, ComplexImage, ComplexImage, SamplingMask) {
        let gt = random_image(h, w, seed);
        let mask = generate_mask(h, w, &MaskParams::default().with_seed(seed)).unwrap();
        let (k, zf) = undersample(&gt, &mask).unwrap();
        (gt, k, zf, mask)
    }

    fn randomize(model: &mut CascadeModel, seed: u64, scale: f32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in model.parameters_mut() {
            *p = rng.random_range(-scale..scale);
        }
    }

    #[test]
    fn config_validation() {
        assert!(CascadeConfig {
            kernel_size: 4,
            ..small_config()
        }
        .validate()
        .is_err());
        assert!(CascadeConfig {
            n_cascades: 0,
            ..small_config()
        }
        .validate()
        .is_err());
        assert!(CascadeConfig {
            n_conv_per_block: 1,
            ..small_config()
        }
        .validate()
        .is_err());
        assert!(CascadeConfig {
            input_channels: 1,
            ..small_config()
        }
        .validate()
        .is_err());
        assert!(CascadeModel::init(
            CascadeConfig {
                kernel_size: 2,
                ..small_config()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = CascadeModel::init(small_config(), 3).unwrap();
        let b = CascadeModel::init(small_config(), 3).unwrap();
        assert_eq!(a, b);
        let c = CascadeModel::init(small_config(), 4).unwrap();
        assert_ne!(a.parameters(), c.parameters());
    }

    #[test]
    fn final_layers_start_at_zero() {
        let m = CascadeModel::init(small_config(), 1).unwrap();
        for c in 0..2 {
            assert!(m.parameters()[m.final_layer_range(c)].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn parameter_count_scales_with_cascades() {
        let one = CascadeConfig {
            n_cascades: 1,
            ..small_config()
        }
        .parameter_count();
        let three = CascadeConfig {
            n_cascades: 3,
            ..small_config()
        }
        .parameter_count();
        assert_eq!(three, 3 * one);
        // 2->8, 8->8, 8->2 with 3x3 kernels
        assert_eq!(one, (8 * 2 * 9 + 8) + (8 * 8 * 9 + 8) + (2 * 8 * 9 + 2));
    }

    #[test]
    fn fresh_model_returns_zero_filled() {
        let (_, k, zf, mask) = setup(20, 24, 5);
        let m = CascadeModel::init(small_config(), 0).unwrap();
        let out = m.forward(&zf, &k, &mask).unwrap();
        assert!(out.sub(&zf).unwrap().max_abs() <= 1e-5);
    }

    #[test]
    fn hard_dc_holds_for_random_parameters() {
        let (_, k, zf, mask) = setup(16, 16, 2);
        let mut m = CascadeModel::init(small_config(), 0).unwrap();
        randomize(&mut m, 9, 0.2);
        let out = m.forward(&zf, &k, &mask).unwrap();
        let ko = fft2c(&out).unwrap();
        for i in 0..ko.len() {
            if mask.sampled()[i] {
                assert!((ko.real()[i] - k.real()[i]).abs() <= 1e-4);
                assert!((ko.imag()[i] - k.imag()[i]).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn shape_is_preserved_for_odd_sizes() {
        let (_, k, zf, mask) = setup(13, 9, 4);
        let mut m = CascadeModel::init(
            CascadeConfig {
                kernel_size: 5,
                ..small_config()
            },
            0,
        )
        .unwrap();
        randomize(&mut m, 1, 0.1);
        assert_eq!(m.forward(&zf, &k, &mask).unwrap().shape(), (13, 9));
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let (_, k, zf, _) = setup(16, 16, 2);
        let other = generate_mask(16, 32, &MaskParams::default()).unwrap();
        let m = CascadeModel::init(small_config(), 0).unwrap();
        assert!(matches!(m.forward(&zf, &k, &other), Err(Error::Shape { .. })));
    }

    #[test]
    fn divergence_reports_cascade() {
        let (_, k, zf, mask) = setup(16, 16, 2);
        let mut m = CascadeModel::init(small_config(), 0).unwrap();
        randomize(&mut m, 1, 0.1);
        let r = m.final_layer_range(1);
        // Enormous final-layer weights of cascade 1 overflow f32.
        for p in &mut m.parameters_mut()[r] {
            *p = 3.0e38;
        }
        match m.forward(&zf, &k, &mask) {
            Err(Error::Divergence { cascade }) => assert_eq!(cascade, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn loss_examples() {
        let gt = random_image(8, 8, 1);
        assert_eq!(loss(&gt, &gt).unwrap(), 0.0);
        let shifted = ComplexImage::new(
            8,
            8,
            gt.real().iter().map(|v| v + 0.1).collect(),
            gt.imag().to_vec(),
        )
        .unwrap();
        assert!((loss(&shifted, &gt).unwrap() - 0.01).abs() < 1e-6);
        assert!(loss(&gt, &random_image(8, 4, 1)).is_err());
    }

    #[test]
    fn probe_gradient_matches_central_difference() {
        // Final-layer weights enter the output linearly, so the loss is
        // quadratic in them and a central difference with eps = 1e-3 is exact
        // up to rounding.
        let (gt, k, zf, mask) = setup(16, 16, 7);
        let mut m = CascadeModel::init(small_config(), 2).unwrap();
        randomize(&mut m, 3, 0.1);
        let p = Problem::new(&zf, &k, &mask).unwrap();
        let (_, grad) = m.loss_and_gradient(&p, &gt).unwrap();
        let params64: Vec<f64> = m.parameters().iter().map(|&v| v as f64).collect();
        let range = m.final_layer_range(1);
        for idx in [range.start, range.start + 17, range.end - 1] {
            let eps = 1e-3;
            let mut plus = params64.clone();
            plus[idx] += eps;
            let mut minus = params64.clone();
            minus[idx] -= eps;
            let fd = (m.loss_with_parameters(&plus, &p, &gt).unwrap()
                - m.loss_with_parameters(&minus, &p, &gt).unwrap())
                / (2.0 * eps);
            let an = grad[idx] as f64;
            // The bias of the last layer is a constant image, whose only
            // k-space coefficient (DC) is always replaced, so both are ~0.
            let tol = 1e-2 * an.abs().max(fd.abs()) + 1e-8;
            assert!((an - fd).abs() <= tol, "param {idx}: analytic {an} fd {fd}");
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_samples() {
        let mut m = CascadeModel::init(small_config(), 0).unwrap();
        randomize(&mut m, 5, 0.1);
        let (g1, k1, z1, m1) = setup(16, 16, 1);
        let (g2, k2, z2, m2) = setup(16, 16, 2);
        let p1 = Problem::new(&z1, &k1, &m1).unwrap();
        let p2 = Problem::new(&z2, &k2, &m2).unwrap();
        let (l1, a) = m.loss_and_gradient(&p1, &g1).unwrap();
        let (l2, b) = m.loss_and_gradient(&p2, &g2).unwrap();
        let (l, g) = m.batch_loss_and_gradient(&[(&p1, &g1), (&p2, &g2)]).unwrap();
        assert!((l - (l1 + l2) / 2.0).abs() < 1e-9);
        for i in 0..g.len() {
            assert!((g[i] - (a[i] + b[i]) / 2.0).abs() <= 1e-6 * (1.0 + g[i].abs()));
        }
    }
}

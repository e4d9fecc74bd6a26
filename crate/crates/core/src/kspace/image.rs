use rustfft::num_complex::Complex;

use crate::error::{Error, Result};

/// A 2D complex-valued slice stored as separate real and imaginary planes.
///
/// The same type holds image-domain and k-space data; which one a value
/// represents is fixed by the operation that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage {
    height: usize,
    width: usize,
    real: Vec<f32>,
    imag: Vec<f32>,
}

impl ComplexImage {
    pub fn new(height: usize, width: usize, real: Vec<f32>, imag: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        let n = height * width;
        if real.len() != n || imag.len() != n {
            return Err(Error::InvalidInput(format!(
                "plane lengths {}/{} do not match {height}x{width}",
                real.len(),
                imag.len()
            )));
        }
        if real.iter().chain(imag.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("complex image".into()));
        }
        Ok(Self {
            height,
            width,
            real,
            imag,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        let n = height * width;
        Self {
            height,
            width,
            real: vec![0.0; n],
            imag: vec![0.0; n],
        }
    }

    /// Real-valued image with zero imaginary part.
    pub fn from_real(height: usize, width: usize, real: Vec<f32>) -> Result<Self> {
        let imag = vec![0.0; real.len()];
        Self::new(height, width, real, imag)
    }

    pub fn from_complex(height: usize, width: usize, data: &[Complex<f64>]) -> Result<Self> {
        let real = data.iter().map(|c| c.re as f32).collect();
        let imag = data.iter().map(|c| c.im as f32).collect();
        Self::new(height, width, real, imag)
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

    pub fn len(&self) -> usize {
        self.real.len()
    }

    pub fn is_empty(&self) -> bool {
        self.real.is_empty()
    }

    pub fn real(&self) -> &[f32] {
        &self.real
    }

    pub fn imag(&self) -> &[f32] {
        &self.imag
    }

    pub fn get(&self, row: usize, col: usize) -> Complex<f32> {
        let i = row * self.width + col;
        Complex::new(self.real[i], self.imag[i])
    }

    pub fn to_complex(&self) -> Vec<Complex<f64>> {
        self.real
            .iter()
            .zip(&self.imag)
            .map(|(&re, &im)| Complex::new(re as f64, im as f64))
            .collect()
    }

    pub fn magnitude(&self) -> Vec<f32> {
        self.real
            .iter()
            .zip(&self.imag)
            .map(|(&re, &im)| (re as f64).hypot(im as f64) as f32)
            .collect()
    }

    pub fn max_magnitude(&self) -> f32 {
        self.magnitude().into_iter().fold(0.0, f32::max)
    }

    /// Multiplies both planes by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            real: self.real.iter().map(|v| v * factor).collect(),
            imag: self.imag.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            real: self.real.iter().zip(&other.real).map(|(a, b)| a + b).collect(),
            imag: self.imag.iter().zip(&other.imag).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            real: self.real.iter().zip(&other.real).map(|(a, b)| a - b).collect(),
            imag: self.imag.iter().zip(&other.imag).map(|(a, b)| a - b).collect(),
        })
    }

    /// Euclidean norm over both planes.
    pub fn norm(&self) -> f64 {
        self.real
            .iter()
            .chain(&self.imag)
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Largest absolute component over both planes.
    pub fn max_abs(&self) -> f32 {
        self.real
            .iter()
            .chain(&self.imag)
            .fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(())
    }

    pub(crate) fn into_planes(self) -> (Vec<f32>, Vec<f32>) {
        (self.real, self.imag)
    }
}

/// A real-valued plane, used for magnitudes and metric inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RealImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "plane of length {} does not match {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("real image".into()));
        }
        Ok(Self { height, width, data })
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

impl ComplexImage {
    pub fn magnitude_image(&self) -> RealImage {
        RealImage {
            height: self.height,
            width: self.width,
            data: self
                .real
                .iter()
                .zip(&self.imag)
                .map(|(&r, &i)| (r as f64).hypot(i as f64))
                .collect(),
        }
    }
}

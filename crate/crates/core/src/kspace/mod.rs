//! Complex slices, centered FFTs, sampling masks and data consistency.

pub mod container;
mod fft;
mod image;
mod mask;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use fft::{fft2c, ifft2c, Fft2Plan};
pub use image::{ComplexImage, RealImage};
pub use mask::{generate_mask, MaskMode, MaskParams, SamplingMask};

use crate::error::{Error, Result};

/// Weight given to measured k-space at sampled positions.
///
/// `0` leaves the prediction untouched, `+inf` replaces sampled
/// coefficients with the measurement. Serialised as a number, or the string
/// `"inf"` for hard replacement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcWeight(f64);

impl DcWeight {
    pub const HARD: DcWeight = DcWeight(f64::INFINITY);

    pub fn new(lambda: f64) -> Result<Self> {
        if lambda.is_nan() || lambda < 0.0 {
            return Err(Error::Config(format!(
                "data-consistency weight must be non-negative, got {lambda}"
            )));
        }
        Ok(Self(lambda))
    }

    pub fn value(&self) -> f64 {
        self.0
    }

    pub fn is_hard(&self) -> bool {
        self.0.is_infinite()
    }

    /// Fraction of the prediction kept at a sampled coefficient,
    /// `1 / (1 + lambda)`.
    pub fn keep_fraction(&self) -> f64 {
        if self.is_hard() {
            0.0
        } else {
            1.0 / (1.0 + self.0)
        }
    }
}

impl Default for DcWeight {
    fn default() -> Self {
        Self::HARD
    }
}

impl Serialize for DcWeight {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_hard() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for DcWeight {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        let v = match Raw::deserialize(d)? {
            Raw::Num(v) => v,
            Raw::Str(s) if s == "inf" || s == "infinity" => f64::INFINITY,
            Raw::Str(s) => return Err(serde::de::Error::custom(format!("invalid weight '{s}'"))),
        };
        DcWeight::new(v).map_err(serde::de::Error::custom)
    }
}

fn check_mask_shape(img: &ComplexImage, mask: &SamplingMask) -> Result<()> {
    if img.shape() != mask.shape() {
        return Err(Error::Shape {
            expected: img.shape(),
            actual: mask.shape(),
        });
    }
    Ok(())
}

/// Retrospective undersampling: returns the masked k-space and its
/// zero-filled image.
pub fn undersample(gt: &ComplexImage, mask: &SamplingMask) -> Result<(ComplexImage, ComplexImage)> {
    check_mask_shape(gt, mask)?;
    let k = fft2c(gt)?;
    let (mut re, mut im) = k.into_planes();
    for ((r, i), &s) in re.iter_mut().zip(im.iter_mut()).zip(mask.sampled()) {
        if !s {
            *r = 0.0;
            *i = 0.0;
        }
    }
    let kspace_us = ComplexImage::new(gt.height(), gt.width(), re, im)?;
    // A full mask measures everything; skip the round trip so the
    // zero-filled image is exactly the ground truth.
    let zero_filled = if mask.sampled().iter().all(|&s| s) {
        gt.clone()
    } else {
        ifft2c(&kspace_us)?
    };
    Ok((kspace_us, zero_filled))
}

/// Data-consistency projection of an image-domain prediction onto the
/// measured k-space.
pub fn data_consistency(
    pred: &ComplexImage,
    kspace_us: &ComplexImage,
    mask: &SamplingMask,
    lambda: f64,
) -> Result<ComplexImage> {
    let weight = DcWeight::new(lambda)?;
    pred.check_same_shape(kspace_us)?;
    check_mask_shape(pred, mask)?;

    let (h, w) = pred.shape();
    let plan = Fft2Plan::<f64>::new(h, w);
    let mut k = pred.to_complex();
    plan.forward(&mut k);
    let keep = weight.keep_fraction();
    let meas = 1.0 - keep;
    for (i, v) in k.iter_mut().enumerate() {
        if mask.sampled()[i] {
            let m =
                rustfft::num_complex::Complex::new(kspace_us.real()[i] as f64, kspace_us.imag()[i] as f64);
            *v = if weight.is_hard() { m } else { *v * keep + m * meas };
        }
    }
    plan.inverse(&mut k);
    ComplexImage::from_complex(h, w, &k)
}

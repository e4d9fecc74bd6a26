//! Deep-cascade MRI reconstruction trained across domains.

pub mod data;
pub mod error;
pub mod eval;
pub mod kspace;
pub mod metrics;
pub mod model;
pub mod patches;
pub mod phase;
pub mod train;

pub use error::{Error, Result};
pub use kspace::{
    data_consistency, fft2c, generate_mask, ifft2c, undersample, ComplexImage, DcWeight, MaskMode,
    MaskParams, RealImage, SamplingMask,
};

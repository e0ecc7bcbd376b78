//! Degraded/ground-truth pair generation and image-quality metrics.

mod jpeg;
mod metrics;
mod noise;
mod patches;
mod synth;

pub use jpeg::{dct8_forward, dct8_inverse, jpeg_blocking_sim, scaled_quant_table, LUMA_QUANT_TABLE};
pub use metrics::{mean_sq_error, psnr, ssim};
pub use noise::add_gaussian_noise;
pub use patches::{PatchBatch, PatchStream};
pub use synth::synthetic_corpus;

use std::fmt;
use std::str::FromStr;

use crate::error::{DurrError, Result};
use crate::image::Image;

/// Which corruption a level refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DegradationKind {
    /// Additive Gaussian noise, level = σ on the 0–255 scale.
    Gaussian,
    /// Block-DCT quantization, level = JPEG quality factor.
    Jpeg,
}

impl DegradationKind {
    pub fn name(self) -> &'static str {
        match self {
            DegradationKind::Gaussian => "denoise",
            DegradationKind::Jpeg => "deblock",
        }
    }

    pub fn validate_level(self, level: f64) -> Result<()> {
        match self {
            DegradationKind::Gaussian if !(level > 0.0 && level.is_finite()) => {
                Err(DurrError::InvalidArgument(format!("noise sigma must be positive, got {level}")))
            }
            DegradationKind::Jpeg if !(1.0..=100.0).contains(&level) || level.fract() != 0.0 => {
                Err(DurrError::InvalidArgument(format!("quality factor must be an integer in 1..=100, got {level}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DegradationKind {
    type Err = DurrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "denoise" | "gaussian" => Ok(Self::Gaussian),
            "deblock" | "jpeg" => Ok(Self::Jpeg),
            other => Err(DurrError::InvalidArgument(format!("unknown task {other:?} (expected denoise or deblock)"))),
        }
    }
}

/// A concrete corruption: kind, level and noise seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub level: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, level: f64, seed: u64) -> Result<Self> {
        kind.validate_level(level)?;
        Ok(Self { kind, level, seed })
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        degrade(img, self.kind, self.level, self.seed)
    }
}

pub fn degrade(img: &Image, kind: DegradationKind, level: f64, seed: u64) -> Result<Image> {
    match kind {
        DegradationKind::Gaussian => add_gaussian_noise(img, level, seed),
        DegradationKind::Jpeg => {
            kind.validate_level(level)?;
            jpeg_blocking_sim(img, level as u32)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_validation() {
        assert!(DegradationSpec::new(DegradationKind::Gaussian, 0.0, 1).is_err());
        assert!(DegradationSpec::new(DegradationKind::Gaussian, 25.0, 1).is_ok());
        assert!(DegradationSpec::new(DegradationKind::Jpeg, 0.0, 1).is_err());
        assert!(DegradationSpec::new(DegradationKind::Jpeg, 101.0, 1).is_err());
        assert!(DegradationSpec::new(DegradationKind::Jpeg, 20.5, 1).is_err());
        assert!(DegradationSpec::new(DegradationKind::Jpeg, 20.0, 1).is_ok());
        assert_eq!("deblock".parse::<DegradationKind>().unwrap(), DegradationKind::Jpeg);
        assert!("blur".parse::<DegradationKind>().is_err());
    }
}

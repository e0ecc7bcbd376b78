use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DurrError, Result};
use crate::image::Image;

/// `clamp(img + n, 0, 1)` with `n ~ N(0, (sigma/255)^2)` drawn from a seeded stream.
pub fn add_gaussian_noise(img: &Image, sigma: f64, seed: u64) -> Result<Image> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(DurrError::InvalidArgument(format!("noise sigma must be positive, got {sigma}")));
    }
    let normal = Normal::new(0.0, sigma / 255.0).expect("positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for v in out.pixels_mut() {
        *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

/// Seeded piecewise-smooth test images: a gradient backdrop with ellipses, rectangles
/// and patches of sinusoidal texture, quantized to 8-bit levels.
pub fn synthetic_corpus(count: usize, width: usize, height: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| synthetic_image(width, height, &mut rng)).collect()
}

enum Shape {
    Ellipse { cx: f32, cy: f32, rx: f32, ry: f32, cos: f32, sin: f32 },
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
}

struct Layer {
    shape: Shape,
    value: f32,
    /// Sinusoidal texture `(amplitude, fx, fy, phase)`; zero amplitude for flat fills.
    texture: (f32, f32, f32, f32),
}

fn synthetic_image(width: usize, height: usize, rng: &mut ChaCha8Rng) -> Image {
    let (w, h) = (width as f32, height as f32);
    let base = rng.gen_range(0.2..0.8f32);
    let gx = rng.gen_range(-0.4..0.4f32) / w;
    let gy = rng.gen_range(-0.4..0.4f32) / h;
    let n_layers = rng.gen_range(3..7);
    let layers: Vec<Layer> = (0..n_layers)
        .map(|_| {
            let shape = if rng.gen_bool(0.5) {
                let angle = rng.gen_range(0.0..PI);
                Shape::Ellipse {
                    cx: rng.gen_range(0.0..w),
                    cy: rng.gen_range(0.0..h),
                    rx: rng.gen_range(0.08..0.4) * w,
                    ry: rng.gen_range(0.08..0.4) * h,
                    cos: angle.cos(),
                    sin: angle.sin(),
                }
            } else {
                let x0 = rng.gen_range(0.0..0.8) * w;
                let y0 = rng.gen_range(0.0..0.8) * h;
                Shape::Rect {
                    x0,
                    y0,
                    x1: x0 + rng.gen_range(0.1..0.6) * w,
                    y1: y0 + rng.gen_range(0.1..0.6) * h,
                }
            };
            let texture = if rng.gen_bool(0.35) {
                let period = rng.gen_range(3.0..12.0f32);
                let angle = rng.gen_range(0.0..PI);
                (
                    rng.gen_range(0.05..0.2),
                    2.0 * PI * angle.cos() / period,
                    2.0 * PI * angle.sin() / period,
                    rng.gen_range(0.0..2.0 * PI),
                )
            } else {
                (0.0, 0.0, 0.0, 0.0)
            };
            Layer {
                shape,
                value: rng.gen_range(0.05..0.95),
                texture,
            }
        })
        .collect();
    Image::from_fn(width, height, |x, y| {
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        let mut v = base + gx * px + gy * py;
        for layer in &layers {
            let inside = match layer.shape {
                Shape::Ellipse { cx, cy, rx, ry, cos, sin } => {
                    let (dx, dy) = (px - cx, py - cy);
                    let u = (dx * cos + dy * sin) / rx;
                    let t = (-dx * sin + dy * cos) / ry;
                    u * u + t * t <= 1.0
                }
                Shape::Rect { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
            };
            if inside {
                let (amp, fx, fy, phase) = layer.texture;
                v = layer.value + amp * (fx * px + fy * py + phase).sin();
            }
        }
        v.clamp(0.0, 1.0)
    })
    .quantized()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_quantized_and_varied() {
        let a = synthetic_corpus(4, 32, 24, 7);
        assert_eq!(a, synthetic_corpus(4, 32, 24, 7));
        assert_ne!(a, synthetic_corpus(4, 32, 24, 8));
        for img in &a {
            assert_eq!(img.dims(), (32, 24));
            assert_eq!(img.quantized(), *img);
            let mean = img.pixels().iter().sum::<f32>() / img.len() as f32;
            let var = img.pixels().iter().map(|v| (v - mean).powi(2)).sum::<f32>() / img.len() as f32;
            assert!(var > 1e-4, "flat synthetic image");
        }
    }
}

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{DurrError, Result};
use crate::image::Image;

/// IJG standard luminance quantization table, row-major.
pub const LUMA_QUANT_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Luminance table scaled by the IJG quality-factor rule.
pub fn scaled_quant_table(qf: u32) -> Result<[u16; 64]> {
    if !(1..=100).contains(&qf) {
        return Err(DurrError::InvalidArgument(format!("quality factor must be in 1..=100, got {qf}")));
    }
    let scale = if qf < 50 { 5000 / qf } else { 200 - 2 * qf };
    Ok(LUMA_QUANT_TABLE.map(|q| ((q as u32 * scale + 50) / 100).clamp(1, 255) as u16))
}

/// Orthonormal DCT-II basis, `basis[u][x]`.
fn basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = alpha * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
            }
        }
        b
    })
}

/// 2-D orthonormal DCT-II of an 8×8 block.
pub fn dct8_forward(block: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| b[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| b[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

/// Inverse of [`dct8_forward`].
pub fn dct8_inverse(coef: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|v| b[v][y] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|u| b[u][x] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

/// Luminance-only JPEG emulation: 8×8 block DCT, quantize with the scaled table, reconstruct.
///
/// Output is clamped to `[0, 1]` but not rounded to 8 bits.
pub fn jpeg_blocking_sim(img: &Image, qf: u32) -> Result<Image> {
    let table = scaled_quant_table(qf)?;
    let padded = img.pad_to_multiple(8);
    let (w, h) = padded.dims();
    let mut out = padded.clone();
    let mut block = [0.0; 64];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for y in 0..8 {
                for x in 0..8 {
                    block[y * 8 + x] = padded.get(bx + x, by + y) as f64 * 255.0 - 128.0;
                }
            }
            let mut coef = dct8_forward(&block);
            for (c, &q) in coef.iter_mut().zip(&table) {
                *c = (*c / q as f64).round() * q as f64;
            }
            let rec = dct8_inverse(&coef);
            let pixels = out.pixels_mut();
            for y in 0..8 {
                for x in 0..8 {
                    pixels[(by + y) * w + bx + x] = (((rec[y * 8 + x] + 128.0) / 255.0).clamp(0.0, 1.0)) as f32;
                }
            }
        }
    }
    out.crop(0, 0, img.width(), img.height())
}

//! Grayscale images in `[0, 1]` and binary PGM/PPM input/output.

use std::fs;
use std::path::Path;

use durr_tensor::Tensor;

use crate::error::{DurrError, Result};

/// Single-channel image, row-major, nominally in `[0, 1]`.
///
/// Intermediate restoration states may leave the unit interval; use [`Image::clamped`]
/// before display or storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(DurrError::Image(format!("empty image {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(DurrError::Image(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let pixels = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn ensure_same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(DurrError::Image(format!(
                "dimension mismatch: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Sub-image with top-left corner `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || x + width > self.width || y + height > self.height {
            return Err(DurrError::Image(format!(
                "crop {width}x{height}+{x}+{y} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(width * height);
        for row in y..y + height {
            pixels.extend_from_slice(&self.pixels[row * self.width + x..row * self.width + x + width]);
        }
        Ok(Self { width, height, pixels })
    }

    /// Extends right/bottom edges by replication up to `width x height`.
    pub fn pad_edge(&self, width: usize, height: usize) -> Self {
        Self::from_fn(width.max(self.width), height.max(self.height), |x, y| {
            self.get(x.min(self.width - 1), y.min(self.height - 1))
        })
    }

    /// Edge-replicates to the next multiple of `m` in both dimensions.
    pub fn pad_to_multiple(&self, m: usize) -> Self {
        self.pad_edge(self.width.div_ceil(m) * m, self.height.div_ceil(m) * m)
    }

    /// `(1, 1, height, width)` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(vec![1, 1, self.height, self.width], self.pixels.clone()).expect("non-empty image")
    }

    /// Reads batch item `index` of a `(b, 1, h, w)` tensor.
    pub fn from_tensor(t: &Tensor<f32>, index: usize) -> Result<Self> {
        let (b, c, h, w) = t.dims4("image")?;
        if c != 1 || index >= b {
            return Err(DurrError::Image(format!("cannot take item {index} of tensor {:?}", t.shape())));
        }
        Self::new(w, h, t.data()[index * h * w..(index + 1) * h * w].to_vec())
    }

    /// Rounds to the nearest 8-bit level after clamping.
    pub fn quantized(&self) -> Self {
        self.map(|v| to_u8(v) as f32 / 255.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes());
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.encode_pgm()).map_err(|e| DurrError::io(path, e))
    }

    /// Parses `P5` grayscale or `P6` color (converted to luma) with maxval 255.
    pub fn decode_pnm(data: &[u8]) -> Result<Self> {
        let mut cursor = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while cursor < data.len() && data[cursor].is_ascii_whitespace() {
                cursor += 1;
            }
            if cursor < data.len() && data[cursor] == b'#' {
                while cursor < data.len() && data[cursor] != b'\n' {
                    cursor += 1;
                }
                continue;
            }
            let start = cursor;
            while cursor < data.len() && !data[cursor].is_ascii_whitespace() {
                cursor += 1;
            }
            if start == cursor {
                return Err(DurrError::Image("truncated PNM header".into()));
            }
            fields.push(String::from_utf8_lossy(&data[start..cursor]).into_owned());
        }
        // exactly one whitespace byte separates header and raster
        cursor += 1;
        let channels = match fields[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(DurrError::Image(format!("unsupported PNM magic {other:?}"))),
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| DurrError::Image(format!("bad PNM header field {s:?}")));
        let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(DurrError::Image(format!("only maxval 255 is supported, got {maxval}")));
        }
        let need = w * h * channels;
        let raster = data
            .get(cursor..cursor + need)
            .ok_or_else(|| DurrError::Image(format!("PNM raster truncated: need {need} bytes")))?;
        if channels == 1 {
            return Self::from_bytes(w, h, raster);
        }
        let luma: Vec<u8> = raster.chunks_exact(3).map(|p| rgb_to_luma(p[0], p[1], p[2])).collect();
        Self::from_bytes(w, h, &luma)
    }

    pub fn read_pnm(path: impl AsRef<Path>) -> Result<Self> {
        let data = fs::read(path.as_ref()).map_err(|e| DurrError::io(&path, e))?;
        Self::decode_pnm(&data)
    }
}

/// `Y = 0.299 R + 0.587 G + 0.114 B`, rounded.
pub fn rgb_to_luma(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round().clamp(0.0, 255.0) as u8
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads every `.pgm`/`.ppm` file of a directory, sorted by file name.
pub fn read_dir(dir: impl AsRef<Path>) -> Result<Vec<Image>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| DurrError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|s| s.to_str()), Some("pgm" | "ppm")))
        .collect();
    paths.sort();
    paths.iter().map(Image::read_pnm).collect()
}

//! RGB float images, PFM files and the error metric.

use std::path::Path;

use crate::error::{Error, Result};

/// Stabilizer in the MAPE denominator.
pub const MAPE_EPSILON: f64 = 0.01;

/// Row-major RGB image, row 0 at the top.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<[f32; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, pixels: vec![[0.0; 3]; width * height] }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<[f32; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Image(format!("{} pixels for a {width}x{height} image", pixels.len())));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: [f32; 3]) {
        self.pixels[y * self.width + x] = v;
    }

    /// Mean over pixels of the channel average.
    pub fn mean(&self) -> f64 {
        if self.pixels.is_empty() {
            return 0.0;
        }
        self.pixels.iter().map(channel_mean).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn to_pfm(&self) -> Vec<u8> {
        let mut out = format!("PF\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        out.reserve(self.pixels.len() * 12);
        for y in (0..self.height).rev() {
            for p in &self.pixels[y * self.width..(y + 1) * self.width] {
                for c in p {
                    out.extend_from_slice(&c.to_le_bytes());
                }
            }
        }
        out
    }

    /// Reads color PFM in either byte order.
    pub fn from_pfm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut token = || -> Result<&str> {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Image("truncated PFM header".into()));
            }
            std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Image("non-ASCII PFM header".into()))
        };
        let magic = token()?;
        if magic != "PF" {
            return Err(Error::Image(format!("expected color PFM magic 'PF', found '{magic}'")));
        }
        let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| Error::Image(format!("bad PFM {what} '{s}'")));
        let width = parse(token()?, "width")?;
        let height = parse(token()?, "height")?;
        let scale: f64 = token()?.parse().map_err(|_| Error::Image("bad PFM scale".into()))?;
        if scale == 0.0 || !scale.is_finite() {
            return Err(Error::Image("PFM scale must be non-zero".into()));
        }
        // Exactly one whitespace byte separates the header from the data.
        pos += 1;
        let need = width * height * 12;
        let data = bytes.get(pos..).unwrap_or_default();
        if data.len() != need {
            return Err(Error::Image(format!("PFM payload is {} bytes, expected {need}", data.len())));
        }
        let little = scale < 0.0;
        let mut img = Image::new(width, height);
        for (i, chunk) in data.chunks_exact(12).enumerate() {
            let mut px = [0.0f32; 3];
            for (c, b) in px.iter_mut().zip(chunk.chunks_exact(4)) {
                let raw = [b[0], b[1], b[2], b[3]];
                *c = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
            }
            let (x, row) = (i % width, i / width);
            img.set(x, height - 1 - row, px);
        }
        Ok(img)
    }

    pub fn write_pfm(&self, path: &Path) -> Result<()> {
        if self.pixels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Image("refusing to write non-finite pixels".into()));
        }
        std::fs::write(path, self.to_pfm()).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }

    pub fn read_pfm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_pfm(&bytes)
    }
}

pub fn channel_mean(p: &[f32; 3]) -> f64 {
    (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0
}

/// Mean absolute percentage error of the per-pixel channel means:
/// `mean |v - r| / (r + 0.01)`.
pub fn mape(image: &Image, reference: &Image) -> Result<f64> {
    if image.width != reference.width || image.height != reference.height {
        return Err(Error::Image(format!(
            "image is {}x{} but reference is {}x{}",
            image.width, image.height, reference.width, reference.height
        )));
    }
    if image.pixels.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = image
        .pixels
        .iter()
        .zip(&reference.pixels)
        .map(|(a, b)| {
            let r = channel_mean(b);
            (channel_mean(a) - r).abs() / (r + MAPE_EPSILON)
        })
        .sum();
    Ok(sum / image.pixels.len() as f64)
}

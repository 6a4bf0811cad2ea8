//! Grayscale frames, patch cropping and frame file IO (binary PGM and PNG).

use std::path::Path;

use crate::domain::BoundingBox;
use crate::error::{Error, Result};

/// Grayscale image with intensities in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub index: usize,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>, index: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("frame must be non-empty".into()));
        }
        if pixels.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {width}x{height} frame",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            pixels,
            index,
        })
    }

    #[inline]
    pub fn get(&self, x: i64, y: i64) -> f32 {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            0.0
        } else {
            self.pixels[y as usize * self.width + x as usize]
        }
    }

    /// Bilinear sample with zero padding outside the image.
    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let (xi, yi) = (x0 as i64, y0 as i64);
        let a = self.get(xi, yi);
        let b = self.get(xi + 1, yi);
        let c = self.get(xi, yi + 1);
        let d = self.get(xi + 1, yi + 1);
        let top = a + (b - a) * fx;
        let bottom = c + (d - c) * fx;
        top + (bottom - top) * fy
    }
}

/// A resampled crop, row-major `height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Patch {
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Resamples the box region to `out_w × out_h`. Output pixel centers are
/// spread uniformly over the box; samples falling outside the frame read 0.
pub fn crop_patch(frame: &Frame, bbox: &BoundingBox, out_w: usize, out_h: usize) -> Patch {
    assert!(out_w > 0 && out_h > 0, "patch size must be positive");
    let sx = f64::from(bbox.width) / out_w as f64;
    let sy = f64::from(bbox.height) / out_h as f64;
    let left = bbox.center_u - f64::from(bbox.width) / 2.0;
    let top = bbox.center_v - f64::from(bbox.height) / 2.0;
    let mut data = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let y = top + (oy as f64 + 0.5) * sy - 0.5;
        for ox in 0..out_w {
            let x = left + (ox as f64 + 0.5) * sx - 0.5;
            data.push(frame.sample(x, y));
        }
    }
    Patch {
        width: out_w,
        height: out_h,
        data,
    }
}

pub fn rgb_to_gray(r: f32, g: f32, b: f32) -> f32 {
    (0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 1.0)
}

/// Decodes a binary (P5) PGM with 8- or 16-bit samples.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let bad = |r: &str| Error::format("PGM", r);
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("missing P5 signature"));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos || pos - start > 9 {
            return Err(bad("expected a header number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after maxval"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(bad("zero dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval out of range"));
    }
    let bpp = if maxval < 256 { 1 } else { 2 };
    let n = (w as usize)
        .checked_mul(h as usize)
        .ok_or_else(|| bad("dimensions overflow"))?;
    let data = &bytes[pos..];
    if data.len() < n.saturating_mul(bpp) {
        return Err(bad("truncated pixel data"));
    }
    let scale = 1.0 / maxval as f32;
    let pixels = if bpp == 1 {
        data[..n].iter().map(|&v| (f32::from(v) * scale).min(1.0)).collect()
    } else {
        data[..2 * n]
            .chunks_exact(2)
            .map(|c| (f32::from(u16::from_be_bytes([c[0], c[1]])) * scale).min(1.0))
            .collect()
    };
    Ok((w as usize, h as usize, pixels))
}

/// Encodes as 8-bit P5.
pub fn encode_pgm(width: usize, height: usize, pixels: &[f32]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

fn decode_png(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    use image::DynamicImage;
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = match img {
        DynamicImage::ImageLuma8(g) => g.pixels().map(|p| f32::from(p.0[0]) / 255.0).collect(),
        DynamicImage::ImageLuma16(g) => g.pixels().map(|p| f32::from(p.0[0]) / 65535.0).collect(),
        other => other
            .to_rgb32f()
            .pixels()
            .map(|p| rgb_to_gray(p.0[0], p.0[1], p.0[2]))
            .collect(),
    };
    Ok((w, h, pixels))
}

pub fn decode_frame(bytes: &[u8], index: usize) -> Result<Frame> {
    let (w, h, px) = if bytes.starts_with(b"P5") {
        decode_pgm(bytes)?
    } else {
        decode_png(bytes)?
    };
    Frame::new(w, h, px, index)
}

pub fn load_frame(path: &Path, index: usize) -> Result<Frame> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_frame(&bytes, index)
}

pub fn save_pgm(path: &Path, frame: &Frame) -> Result<()> {
    std::fs::write(path, encode_pgm(frame.width, frame.height, &frame.pixels))
        .map_err(|e| Error::io(path, e))
}

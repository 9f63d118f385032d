//! Grayscale pixel grids with PGM and inline base64 encodings.

use std::io::Cursor;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Image(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// Sub-image `[x, x+w) × [y, y+h)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::Image(format!(
                "bbox [{x}, {y}, {w}, {h}] outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(w * h);
        for row in y..y + h {
            pixels.extend_from_slice(&self.pixels[row * self.width + x..row * self.width + x + w]);
        }
        Ok(Self {
            width: w,
            height: h,
            pixels,
        })
    }

    /// Nearest-neighbor resize; identity when the size already matches.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = (y * self.height / height).min(self.height - 1);
            for x in 0..width {
                let sx = (x * self.width / width).min(self.width - 1);
                pixels.push(self.get(sx, sy));
            }
        }
        Self { width, height, pixels }
    }

    /// Binary PGM (P5) bytes.
    pub fn to_pgm(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        PnmEncoder::new(&mut out)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(&self.pixels, self.width as u32, self.height as u32, ExtendedColorType::L8)
            .map_err(|e| Error::Image(e.to_string()))?;
        Ok(out)
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let img = image::load(Cursor::new(bytes), ImageFormat::Pnm).map_err(|e| Error::Image(e.to_string()))?;
        let gray = img.into_luma8();
        let (w, h) = gray.dimensions();
        Self::new(w as usize, h as usize, gray.into_raw())
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm(&bytes)
    }

    /// Row-major pixel bytes in standard base64.
    pub fn to_b64(&self) -> String {
        STANDARD.encode(&self.pixels)
    }

    pub fn from_b64(b64: &str, width: usize, height: usize) -> Result<Self> {
        let pixels = STANDARD.decode(b64).map_err(|e| Error::Image(format!("base64: {e}")))?;
        Self::new(width, height, pixels)
    }

    /// Stack images of equal width vertically.
    pub fn vstack(parts: &[GrayImage]) -> Result<Self> {
        let width = parts.first().map_or(0, |p| p.width);
        if parts.iter().any(|p| p.width != width) {
            return Err(Error::Image("cannot stack images of different widths".into()));
        }
        let height = parts.iter().map(|p| p.height).sum();
        let pixels = parts.iter().flat_map(|p| p.pixels.iter().copied()).collect();
        Self::new(width, height, pixels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> GrayImage {
        GrayImage::new(3, 2, vec![0, 10, 20, 30, 40, 255]).unwrap()
    }

    #[test]
    fn pgm_round_trip() {
        let img = sample();
        let bytes = img.to_pgm().unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert_eq!(GrayImage::from_pgm(&bytes).unwrap(), img);
    }

    #[test]
    fn b64_round_trip() {
        let img = sample();
        assert_eq!(GrayImage::from_b64(&img.to_b64(), 3, 2).unwrap(), img);
        assert!(GrayImage::from_b64(&img.to_b64(), 2, 2).is_err());
    }

    #[test]
    fn crop_and_resize() {
        let img = sample();
        let c = img.crop(1, 0, 2, 2).unwrap();
        assert_eq!(c.pixels(), &[10, 20, 40, 255]);
        assert!(img.crop(2, 0, 2, 1).is_err());
        let r = c.resize_nearest(4, 2);
        assert_eq!(r.pixels(), &[10, 10, 20, 20, 40, 40, 255, 255]);
    }
}

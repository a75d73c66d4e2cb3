//! Image buffers and their on-disk encodings.

use std::io::{self, Read, Write};
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma, Rgb};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),
    #[error("bad depth file: {0}")]
    DepthFormat(String),
}

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_shape(&self, other: &RgbImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// 8-bit quantization used for PNG output.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        Self { width, height, data: bytes.iter().map(|&b| b as f64 / 255.0).collect() }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let buf: ImageBuffer<Rgb<u8>, _> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.to_rgb8()).expect("buffer size");
        let mut out = io::Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, ImageError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self::from_rgb8(w as usize, h as usize, img.as_raw()))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        Self::decode_png(&std::fs::read(path)?)
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Row-major single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ScalarImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Binary per-view mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask2D {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
    pub view_id: String,
}

impl Mask2D {
    pub fn new(width: usize, height: usize, view_id: impl Into<String>) -> Self {
        Self { width, height, bits: vec![false; width * height], view_id: view_id.into() }
    }

    pub fn filled(width: usize, height: usize, value: bool, view_id: impl Into<String>) -> Self {
        Self { width, height, bits: vec![value; width * height], view_id: view_id.into() }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Morphological dilation with a Euclidean disk of radius `r` pixels.
    pub fn dilate(&self, r: usize) -> Mask2D {
        if r == 0 {
            return self.clone();
        }
        let ri = r as isize;
        let offsets: Vec<(isize, isize)> = (-ri..=ri)
            .flat_map(|dy| (-ri..=ri).map(move |dx| (dx, dy)))
            .filter(|(dx, dy)| dx * dx + dy * dy <= ri * ri)
            .collect();
        let (w, h) = (self.width as isize, self.height as isize);
        let mut out = Mask2D::new(self.width, self.height, self.view_id.clone());
        for y in 0..h {
            for x in 0..w {
                if !self.bits[(y * w + x) as usize] {
                    continue;
                }
                for (dx, dy) in &offsets {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && nx < w && ny < h {
                        out.bits[(ny * w + nx) as usize] = true;
                    }
                }
            }
        }
        out
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let raw: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        let buf: ImageBuffer<Luma<u8>, _> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size");
        let mut out = io::Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn decode_png(bytes: &[u8], view_id: impl Into<String>) -> Result<Self, ImageError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            bits: img.as_raw().iter().map(|&v| v >= 128).collect(),
            view_id: view_id.into(),
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }
}

/// Per-pixel expected depth plus validity.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

pub const DEPTH_MAGIC: &[u8; 4] = b"GSDD";

impl DepthMap {
    /// `GSDD` magic, u32 width, u32 height, u32 reserved, then row-major
    /// little-endian f32 depths (0 where invalid).
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), ImageError> {
        out.write_all(DEPTH_MAGIC)?;
        out.write_all(&(self.width as u32).to_le_bytes())?;
        out.write_all(&(self.height as u32).to_le_bytes())?;
        out.write_all(&0u32.to_le_bytes())?;
        let mut body = Vec::with_capacity(self.depth.len() * 4);
        for (d, ok) in self.depth.iter().zip(&self.valid) {
            let v = if *ok { *d as f32 } else { 0.0 };
            body.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&body)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, ImageError> {
        let mut header = [0u8; 16];
        input.read_exact(&mut header)?;
        if &header[..4] != DEPTH_MAGIC {
            return Err(ImageError::DepthFormat("missing GSDD magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (width, height) = (word(4), word(8));
        let mut body = vec![0u8; width * height * 4];
        input.read_exact(&mut body)?;
        let depth: Vec<f64> =
            body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        let valid = depth.iter().map(|&d| d > 0.0).collect();
        Ok(Self { width, height, depth, valid })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

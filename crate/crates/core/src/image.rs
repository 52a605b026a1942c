//! RGB8 rasters, binary edit masks and their PNG codecs.
//!
//! Images travel through the engine at native resolution. Masks use the
//! convention that a set bit marks a pixel the editor may change; a clear
//! bit marks a pixel that must come back untouched.

use std::fmt;
use std::io::Cursor;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default luma threshold used when ingesting mask PNGs.
pub const DEFAULT_MASK_THRESHOLD: u8 = 128;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImageError {
    #[error("malformed PNG: {0}")]
    MalformedPng(String),
    #[error("unsupported PNG bit depth {0} (only 8-bit is accepted)")]
    UnsupportedDepth(u8),
    #[error("image dimensions must be at least 1x1 (got {width}x{height})")]
    ZeroDimension { width: u32, height: u32 },
    #[error("pixel buffer holds {actual} bytes, expected {expected}")]
    BufferLength { expected: usize, actual: usize },
    #[error("dimension mismatch: {left_w}x{left_h} vs {right_w}x{right_h}")]
    DimMismatch {
        left_w: u32,
        left_h: u32,
        right_w: u32,
        right_h: u32,
    },
    #[error("PNG encoding failed: {0}")]
    Encode(String),
    #[error("invalid base64 payload: {0}")]
    Base64(String),
}

/// Width/height pair shared by images and masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub width: u32,
    pub height: u32,
}

impl Dims {
    pub fn new(width: u32, height: u32) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::ZeroDimension { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn area(self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Errors unless `self` and `other` describe the same raster size.
    pub fn ensure_eq(self, other: Dims) -> Result<(), ImageError> {
        if self == other {
            Ok(())
        } else {
            Err(ImageError::DimMismatch {
                left_w: self.width,
                left_h: self.height,
                right_w: other.width,
                right_h: other.height,
            })
        }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Row-major RGB8 raster.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuf {
    dims: Dims,
    pixels: Vec<u8>,
}

impl fmt::Debug for ImageBuf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageBuf")
            .field("width", &self.dims.width)
            .field("height", &self.dims.height)
            .finish_non_exhaustive()
    }
}

impl ImageBuf {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ImageError> {
        let dims = Dims::new(width, height)?;
        let expected = dims.area() * 3;
        if pixels.len() != expected {
            return Err(ImageError::BufferLength {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self { dims, pixels })
    }

    /// A `width` x `height` image filled with one color.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, ImageError> {
        let dims = Dims::new(width, height)?;
        let pixels = rgb.iter().copied().cycle().take(dims.area() * 3).collect();
        Ok(Self { dims, pixels })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn width(&self) -> u32 {
        self.dims.width
    }

    pub fn height(&self) -> u32 {
        self.dims.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.dims.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.dims.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_png(&self) -> Result<Vec<u8>, ImageError> {
        encode_png(self.dims, png::ColorType::Rgb, &self.pixels)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self, ImageError> {
        decode_image(bytes)
    }

    pub fn to_base64_png(&self) -> Result<String, ImageError> {
        Ok(B64.encode(self.to_png()?))
    }

    pub fn from_base64_png(text: &str) -> Result<Self, ImageError> {
        let bytes = B64
            .decode(text.trim())
            .map_err(|e| ImageError::Base64(e.to_string()))?;
        decode_image(&bytes)
    }
}

/// Per-pixel edit map. `true` means the pixel may change.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    dims: Dims,
    bits: Vec<bool>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.dims.width)
            .field("height", &self.dims.height)
            .field("popcount", &self.popcount())
            .finish()
    }
}

impl BinaryMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, ImageError> {
        let dims = Dims::new(width, height)?;
        if bits.len() != dims.area() {
            return Err(ImageError::BufferLength {
                expected: dims.area(),
                actual: bits.len(),
            });
        }
        Ok(Self { dims, bits })
    }

    pub fn empty(width: u32, height: u32) -> Result<Self, ImageError> {
        let dims = Dims::new(width, height)?;
        Ok(Self {
            dims,
            bits: vec![false; dims.area()],
        })
    }

    /// Builds a mask by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> bool,
    ) -> Result<Self, ImageError> {
        let dims = Dims::new(width, height)?;
        let mut bits = Vec::with_capacity(dims.area());
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Ok(Self { dims, bits })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn width(&self) -> u32 {
        self.dims.width
    }

    pub fn height(&self) -> u32 {
        self.dims.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.dims.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.dims.width as usize;
        self.bits[y as usize * w + x as usize] = value;
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|b| *b)
    }

    pub fn complement(&self) -> Self {
        Self {
            dims: self.dims,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims == other.dims && self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }

    /// Single-channel PNG with values {0, 255}.
    pub fn to_png(&self) -> Result<Vec<u8>, ImageError> {
        let raw: Vec<u8> = self.bits.iter().map(|b| if *b { 255 } else { 0 }).collect();
        encode_png(self.dims, png::ColorType::Grayscale, &raw)
    }

    pub fn to_base64_png(&self) -> Result<String, ImageError> {
        Ok(B64.encode(self.to_png()?))
    }

    pub fn from_base64_png(text: &str, threshold: u8) -> Result<Self, ImageError> {
        let bytes = B64
            .decode(text.trim())
            .map_err(|e| ImageError::Base64(e.to_string()))?;
        decode_mask(&bytes, threshold)
    }
}

/// A mask with every bit set: the whole image is editable.
pub fn full_mask(width: u32, height: u32) -> Result<BinaryMask, ImageError> {
    let dims = Dims::new(width, height)?;
    Ok(BinaryMask {
        dims,
        bits: vec![true; dims.area()],
    })
}

struct RawPng {
    dims: Dims,
    color: png::ColorType,
    data: Vec<u8>,
}

fn read_png(bytes: &[u8]) -> Result<RawPng, ImageError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    // Palette and sub-byte grayscale are widened to 8 bits per channel; 16-bit
    // samples are left alone so they can be rejected below.
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| ImageError::MalformedPng(e.to_string()))?;
    let (source_depth, source_color) = {
        let info = reader.info();
        (info.bit_depth, info.color_type)
    };
    if source_depth == png::BitDepth::Sixteen {
        return Err(ImageError::UnsupportedDepth(16));
    }
    if source_depth != png::BitDepth::Eight && source_color != png::ColorType::Indexed {
        return Err(ImageError::UnsupportedDepth(source_depth as u8));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImageError::MalformedPng("image too large".into()))?;
    let mut buf = vec![0; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| ImageError::MalformedPng(e.to_string()))?;
    buf.truncate(frame.buffer_size());
    let dims = Dims::new(frame.width, frame.height)?;
    Ok(RawPng {
        dims,
        color: frame.color_type,
        data: buf,
    })
}

/// Decodes an 8-bit PNG into RGB. Alpha is dropped, gray is replicated.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuf, ImageError> {
    let raw = read_png(bytes)?;
    let pixels = match raw.color {
        png::ColorType::Rgb => raw.data,
        png::ColorType::Rgba => raw
            .data
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => raw.data.iter().flat_map(|g| [*g, *g, *g]).collect(),
        png::ColorType::GrayscaleAlpha => raw
            .data
            .chunks_exact(2)
            .flat_map(|p| [p[0], p[0], p[0]])
            .collect(),
        png::ColorType::Indexed => {
            return Err(ImageError::MalformedPng("unexpanded palette data".into()))
        }
    };
    ImageBuf::new(raw.dims.width, raw.dims.height, pixels)
}

/// Rec.601 integer luma.
fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

/// Decodes a mask PNG: a pixel is set iff its luma is at least `threshold`.
pub fn decode_mask(bytes: &[u8], threshold: u8) -> Result<BinaryMask, ImageError> {
    let raw = read_png(bytes)?;
    let bits: Vec<bool> = match raw.color {
        png::ColorType::Grayscale => raw.data.iter().map(|v| *v >= threshold).collect(),
        png::ColorType::GrayscaleAlpha => {
            raw.data.chunks_exact(2).map(|p| p[0] >= threshold).collect()
        }
        png::ColorType::Rgb => raw
            .data
            .chunks_exact(3)
            .map(|p| luma(p[0], p[1], p[2]) >= threshold)
            .collect(),
        png::ColorType::Rgba => raw
            .data
            .chunks_exact(4)
            .map(|p| luma(p[0], p[1], p[2]) >= threshold)
            .collect(),
        png::ColorType::Indexed => {
            return Err(ImageError::MalformedPng("unexpanded palette data".into()))
        }
    };
    BinaryMask::new(raw.dims.width, raw.dims.height, bits)
}

fn encode_png(dims: Dims, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>, ImageError> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, dims.width, dims.height);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        encoder.set_compression(png::Compression::Fast);
        let mut writer = encoder
            .write_header()
            .map_err(|e| ImageError::Encode(e.to_string()))?;
        writer
            .write_image_data(data)
            .map_err(|e| ImageError::Encode(e.to_string()))?;
        writer
            .finish()
            .map_err(|e| ImageError::Encode(e.to_string()))?;
    }
    Ok(out)
}

/// Lowercase hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Composites a red layer at 50% opacity over the masked pixels.
pub fn render_overlay(image: &ImageBuf, mask: &BinaryMask) -> Result<ImageBuf, ImageError> {
    image.dims().ensure_eq(mask.dims())?;
    let mut out = image.clone();
    for (px, set) in out.pixels.chunks_exact_mut(3).zip(mask.bits()) {
        if *set {
            px[0] = ((px[0] as u16 + 255) / 2) as u8;
            px[1] /= 2;
            px[2] /= 2;
        }
    }
    Ok(out)
}

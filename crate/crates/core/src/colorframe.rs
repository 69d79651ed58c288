//! Color-frame preprocessing: RGB to YCbCr conversion, bilinear resizing and
//! per-channel normalization.
//!
//! The fixed pipeline order is decode, optional YCbCr conversion, divide by
//! 255, resize, normalize. [`Preprocessor`] bundles it.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// Row-major conversion matrix applied to `[R, G, B]`.
pub const YCBCR_MATRIX: [[f64; 3]; 3] = [
    [0.300, 0.586, 0.113],
    [-0.168, -0.328, 0.496],
    [0.496, -0.414, -0.082],
];

/// Offset added after the matrix product.
pub const YCBCR_OFFSET: [f64; 3] = [0.0, 128.0, 128.0];

/// 8-bit RGB raster. Channel values are in `[0, 255]` by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::dim("rgb_image", format!("{width}x{height} is empty")));
        }
        if pixels.len() != width * height {
            return Err(Error::dim(
                "rgb_image",
                format!("{} pixels for {width}x{height}", pixels.len()),
            ));
        }
        Ok(Self { width, height, pixels })
    }

    /// Decodes a PNG/JPEG file; any alpha channel is dropped.
    pub fn open(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::data(path, e.to_string()))?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let pixels = rgb.pixels().map(|p| p.0).collect();
        Self::new(w, h, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    /// Planar `[3, H, W]` channel values in pixel units.
    pub fn planar(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.pixels.iter().enumerate() {
            for c in 0..3 {
                out[c * n + i] = f64::from(px[c]);
            }
        }
        out
    }
}

/// Real-valued Y, Cb, Cr planes. Values are neither rounded nor clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct YcbcrImage {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
}

impl YcbcrImage {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    pub fn planar(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.pixels.iter().enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c];
            }
        }
        out
    }
}

/// Converts one `[R, G, B]` triple (any real values) to `[Y, Cb, Cr]`.
#[inline]
pub fn ycbcr_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (row, (coeffs, offset)) in YCBCR_MATRIX.iter().zip(YCBCR_OFFSET).enumerate() {
        out[row] = coeffs[0] * rgb[0] + coeffs[1] * rgb[1] + coeffs[2] * rgb[2] + offset;
    }
    out
}

pub fn rgb_to_ycbcr(img: &RgbImage) -> YcbcrImage {
    let pixels = img
        .pixels
        .iter()
        .map(|p| ycbcr_pixel([f64::from(p[0]), f64::from(p[1]), f64::from(p[2])]))
        .collect();
    YcbcrImage { width: img.width, height: img.height, pixels }
}

/// Which color frame the model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ColorFrame {
    #[default]
    Rgb,
    Ycbcr,
}

impl fmt::Display for ColorFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColorFrame::Rgb => "rgb",
            ColorFrame::Ycbcr => "ycbcr",
        })
    }
}

impl FromStr for ColorFrame {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(ColorFrame::Rgb),
            "ycbcr" | "cbcry" => Ok(ColorFrame::Ycbcr),
            other => Err(Error::Config(format!("unknown color frame `{other}`"))),
        }
    }
}

/// Per-channel mean/std in unit-scaled channel space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    mean: [f64; 3],
    std: [f64; 3],
}

impl NormalizationSpec {
    pub const IMAGENET: Self = Self { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] };

    pub fn new(mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        if std.iter().any(|&s| s.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)) {
            return Err(Error::Config(format!("normalization std must be positive, got {std:?}")));
        }
        Ok(Self { mean, std })
    }

    pub fn mean(&self) -> [f64; 3] {
        self.mean
    }

    pub fn std(&self) -> [f64; 3] {
        self.std
    }

    /// `(x - mean[c]) / std[c]` in place on planar `[3, ..]` data.
    pub fn normalize(&self, planar: &mut [f64]) {
        let n = planar.len() / 3;
        for (c, plane) in planar.chunks_mut(n).enumerate() {
            plane.iter_mut().for_each(|v| *v = (*v - self.mean[c]) / self.std[c]);
        }
    }

    pub fn denormalize(&self, planar: &mut [f64]) {
        let n = planar.len() / 3;
        for (c, plane) in planar.chunks_mut(n).enumerate() {
            plane.iter_mut().for_each(|v| *v = *v * self.std[c] + self.mean[c]);
        }
    }
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self::IMAGENET
    }
}

/// Bilinear resize of planar `[channels, h, w]` data using half-pixel
/// centers (`src = (dst + 0.5) * in / out - 0.5`, clamped to the border).
pub fn resize_bilinear(
    planar: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    target_h: usize,
    target_w: usize,
) -> Result<Vec<f64>> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::Config(format!("resize target {target_h}x{target_w} must be positive")));
    }
    if planar.len() != channels * h * w {
        return Err(Error::dim("resize_bilinear", format!("{} values for {channels}x{h}x{w}", planar.len())));
    }
    if (h, w) == (target_h, target_w) {
        return Ok(planar.to_vec());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = taps(target_h, h);
    let xs = taps(target_w, w);
    let mut out = Vec::with_capacity(channels * target_h * target_w);
    for plane in planar.chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(out)
}

/// The full decode-to-tensor pipeline for one color frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub frame: ColorFrame,
    pub size: usize,
    pub norm: NormalizationSpec,
}

impl Preprocessor {
    pub fn new(frame: ColorFrame, size: usize) -> Self {
        Self { frame, size, norm: NormalizationSpec::IMAGENET }
    }

    /// Color conversion and unit scaling at native resolution, `[3, H, W]`.
    pub fn unit_planes(&self, img: &RgbImage) -> Vec<f64> {
        let mut planes = match self.frame {
            ColorFrame::Rgb => img.planar(),
            ColorFrame::Ycbcr => rgb_to_ycbcr(img).planar(),
        };
        planes.iter_mut().for_each(|v| *v /= 255.0);
        planes
    }

    /// Resize and normalize unit-scaled planes into a `[3, size, size]` tensor.
    pub fn finish(&self, planes: Vec<f64>, h: usize, w: usize) -> Result<Tensor<f32>> {
        let mut resized = resize_bilinear(&planes, 3, h, w, self.size, self.size)?;
        self.norm.normalize(&mut resized);
        Tensor::new([3, self.size, self.size], resized.into_iter().map(|v| v as f32).collect())
    }

    pub fn apply(&self, img: &RgbImage) -> Result<Tensor<f32>> {
        let planes = self.unit_planes(img);
        self.finish(planes, img.height(), img.width())
    }

    pub fn load(&self, path: &Path) -> Result<Tensor<f32>> {
        self.apply(&RgbImage::open(path)?)
    }
}

const CACHE_MAGIC: &[u8; 4] = b"SWFC";

/// Writes unit-scaled planes as a cache file: a 16-byte header (magic
/// `SWFC`, dtype code, height, width as little-endian u32) followed by
/// `3*H*W` little-endian f32 values.
pub fn write_cache(path: &Path, planes: &[f64], height: usize, width: usize) -> Result<()> {
    if planes.len() != 3 * height * width {
        return Err(Error::dim("write_cache", format!("{} values for 3x{height}x{width}", planes.len())));
    }
    let mut buf = Vec::with_capacity(16 + 4 * planes.len());
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&DType::F32.code().to_le_bytes());
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    for &v in planes {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Reads a cache file written by [`write_cache`]; returns `(planes, h, w)`.
pub fn read_cache(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let bytes = fs::read(path)?;
    let bad = |why: &str| Error::Format(format!("{}: {why}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != CACHE_MAGIC {
        return Err(bad("missing cache header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let dtype = DType::from_code(word(4)).ok_or_else(|| bad("unknown dtype code"))?;
    let (h, w) = (word(8) as usize, word(12) as usize);
    let n = 3 * h * w;
    if bytes.len() != 16 + n * dtype.size() {
        return Err(bad("payload length does not match header"));
    }
    let payload = &bytes[16..];
    let planes = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok((planes, h, w))
}

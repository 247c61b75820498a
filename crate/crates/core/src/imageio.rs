//! Image batches: synthetic generation, augmentation, and PPM/PGM and raw
//! batch persistence.
//!
//! Raw batch layout (little-endian): `"SIMB"` | version `u32` | count,
//! channels, height, width as `u32` | `f32` payload in batch-major,
//! channel-planar, row-major order.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed header at byte offset {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("truncated payload at byte offset {offset}: expected {expected} bytes, found {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("bad magic {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported raw batch version {0}")]
    UnsupportedVersion(u32),
    #[error("declared shape {declared:?} needs {expected} values, payload has {found}")]
    PayloadMismatch {
        declared: [usize; 4],
        expected: usize,
        found: usize,
    },
    #[error("invalid image request: {0}")]
    Invalid(String),
}

/// `count × channels × height × width` pixels, batch-major, channel-planar.
///
/// Raw images hold values in `[0, 1]`; after [`normalize`] they hold
/// standardized values.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl ImageBatch {
    pub fn new(
        count: usize,
        channels: usize,
        height: usize,
        width: usize,
        pixels: Vec<f32>,
    ) -> Result<Self, ImageError> {
        let expected = count * channels * height * width;
        if pixels.len() != expected {
            return Err(ImageError::PayloadMismatch {
                declared: [count, channels, height, width],
                expected,
                found: pixels.len(),
            });
        }
        Ok(Self {
            count,
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(count: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            count,
            channels,
            height,
            width,
            pixels: vec![0.0; count * channels * height * width],
        }
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.channels + c) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[self.index(n, c, y, x)]
    }

    /// Copy of image `n` as a batch of one.
    pub fn image(&self, n: usize) -> ImageBatch {
        let len = self.image_len();
        ImageBatch {
            count: 1,
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixels: self.pixels[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// Concatenate single- or multi-image batches of identical geometry.
    pub fn stack(parts: &[ImageBatch]) -> Result<ImageBatch, ImageError> {
        let first = parts
            .first()
            .ok_or_else(|| ImageError::Invalid("empty stack".into()))?;
        let mut out = ImageBatch::zeros(0, first.channels, first.height, first.width);
        for p in parts {
            if (p.channels, p.height, p.width) != (first.channels, first.height, first.width) {
                return Err(ImageError::Invalid("stack of mismatched geometries".into()));
            }
            out.count += p.count;
            out.pixels.extend_from_slice(&p.pixels);
        }
        Ok(out)
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Mirror every image left to right.
    pub fn hflip(&self) -> ImageBatch {
        let mut out = self.clone();
        for row in out.pixels.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    pub fn clamp_unit(&self) -> ImageBatch {
        let mut out = self.clone();
        out.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }
}

/// Background texture frequency in cycles per pixel; fine enough that target
/// smoothing removes almost all of it.
const TEXTURE_FREQ: f32 = 0.4;

/// Number of classes produced by [`generate_synthetic`].
pub const SYNTHETIC_CLASSES: usize = 8;

/// Procedural 3-channel images with labels.
///
/// Each image is a gray intensity ramp in a random direction with a faint
/// fine-grained stripe texture, overlaid with one colored shape. The label encodes the
/// shape kind (square or disk) and the quadrant holding it; color, size, and
/// background are nuisance factors.
pub fn generate_synthetic(
    n: usize,
    size: usize,
    seed: u64,
) -> Result<(ImageBatch, Vec<usize>), ImageError> {
    if n == 0 {
        return Err(ImageError::Invalid(
            "synthetic batch needs at least one image".into(),
        ));
    }
    if size == 0 || !size.is_multiple_of(4) {
        return Err(ImageError::Invalid(format!(
            "synthetic image size {size} must be a positive multiple of 4"
        )));
    }
    let mut rng = crate::rng::seeded(seed);
    let mut batch = ImageBatch::zeros(n, 3, size, size);
    let mut labels = Vec::with_capacity(n);
    let s = size as f32;
    for img in 0..n {
        let label = rng.random_range(0..SYNTHETIC_CLASSES);
        labels.push(label);
        let disk = label >= 4;
        let quadrant = label % 4;

        let angle = rng.random_range(0.0..2.0 * PI);
        let base = rng.random_range(0.4f32..0.6);
        let slope = rng.random_range(0.25f32..0.4);
        let tex_angle = rng.random_range(0.0..PI);
        let tex_phase = rng.random_range(0.0..2.0 * PI);
        let color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0f32..1.0));
        let extent = rng.random_range(0.22f32..0.36) * s;
        let jitter = s / 16.0;
        let cx =
            if quadrant % 2 == 0 { 0.25 } else { 0.75 } * s + rng.random_range(-jitter..jitter);
        let cy = if quadrant < 2 { 0.25 } else { 0.75 } * s + rng.random_range(-jitter..jitter);

        for y in 0..size {
            for x in 0..size {
                let (u, v) = (x as f32 / (s - 1.0) - 0.5, y as f32 / (s - 1.0) - 0.5);
                let ramp = base + slope * (u * angle.cos() + v * angle.sin());
                let along = x as f32 * tex_angle.cos() + y as f32 * tex_angle.sin();
                let stripe = 0.03 * (along * 2.0 * PI * TEXTURE_FREQ + tex_phase).sin();
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let inside = if disk {
                    dx * dx + dy * dy <= (extent / 2.0) * (extent / 2.0)
                } else {
                    dx.abs() <= extent / 2.0 && dy.abs() <= extent / 2.0
                };
                for (c, &col) in color.iter().enumerate() {
                    let v = if inside { col } else { ramp + stripe };
                    let idx = batch.index(img, c, y, x);
                    batch.pixels[idx] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok((batch, labels))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub crop_scale_min: f32,
    pub crop_scale_max: f32,
    pub aspect_min: f32,
    pub aspect_max: f32,
    pub hflip_prob: f32,
    /// Per-channel normalization mean; a single value applies to every channel.
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale_min: 0.67,
            crop_scale_max: 1.0,
            aspect_min: 3.0 / 4.0,
            aspect_max: 4.0 / 3.0,
            hflip_prob: 0.5,
            mean: vec![0.5],
            std: vec![0.5],
        }
    }
}

impl AugmentConfig {
    /// Crop-free, flip-free configuration (normalization only).
    pub fn identity() -> Self {
        Self {
            crop_scale_min: 1.0,
            crop_scale_max: 1.0,
            aspect_min: 1.0,
            aspect_max: 1.0,
            hflip_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        let bad = |m: &str| Err(ImageError::Invalid(m.to_string()));
        if !(self.crop_scale_min > 0.0
            && self.crop_scale_min <= self.crop_scale_max
            && self.crop_scale_max <= 1.0)
        {
            return bad("crop scale must satisfy 0 < min <= max <= 1");
        }
        if !(self.aspect_min > 0.0 && self.aspect_min <= self.aspect_max) {
            return bad("aspect range must satisfy 0 < min <= max");
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return bad("flip probability must be in [0, 1]");
        }
        if self.mean.is_empty() || self.std.is_empty() || self.std.iter().any(|&s| s <= 0.0) {
            return bad("normalization needs a mean and a positive std");
        }
        Ok(())
    }

    fn channel_stats(&self, c: usize) -> (f32, f32) {
        let pick = |v: &[f32]| {
            if v.len() == 1 {
                v[0]
            } else {
                v[c.min(v.len() - 1)]
            }
        };
        (pick(&self.mean), pick(&self.std))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Draws a crop whose area fraction and aspect ratio lie in the configured
/// ranges; after 10 failed draws falls back to the largest centered crop
/// with an admissible aspect ratio.
pub fn sample_crop(
    height: usize,
    width: usize,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> CropBox {
    if cfg.crop_scale_min >= 1.0 {
        // only the whole image has full area
        return CropBox {
            top: 0,
            left: 0,
            height,
            width,
        };
    }
    let area = (height * width) as f32;
    let (log_lo, log_hi) = (cfg.aspect_min.ln(), cfg.aspect_max.ln());
    for _ in 0..10 {
        let scale = if cfg.crop_scale_min < cfg.crop_scale_max {
            rng.random_range(cfg.crop_scale_min..=cfg.crop_scale_max)
        } else {
            cfg.crop_scale_min
        };
        let aspect = if log_lo < log_hi {
            rng.random_range(log_lo..=log_hi).exp()
        } else {
            cfg.aspect_min
        };
        let w = (scale * area * aspect).sqrt().round() as usize;
        let h = (scale * area / aspect).sqrt().round() as usize;
        if w == 0 || h == 0 || w > width || h > height {
            continue;
        }
        let frac = (w * h) as f32 / area;
        if frac < cfg.crop_scale_min || frac > cfg.crop_scale_max {
            continue;
        }
        let top = rng.random_range(0..=height - h);
        let left = rng.random_range(0..=width - w);
        return CropBox {
            top,
            left,
            height: h,
            width: w,
        };
    }
    let ratio = width as f32 / height as f32;
    let (h, w) = if ratio < cfg.aspect_min {
        ((width as f32 / cfg.aspect_min).round() as usize, width)
    } else if ratio > cfg.aspect_max {
        (height, (height as f32 * cfg.aspect_max).round() as usize)
    } else {
        (height, width)
    };
    CropBox {
        top: (height - h) / 2,
        left: (width - w) / 2,
        height: h,
        width: w,
    }
}

/// Bilinear resample of `crop` from image `n` into an `out_h × out_w` image
/// (half-pixel centers, edge clamped).
fn resize_crop(img: &ImageBatch, n: usize, crop: CropBox, out_h: usize, out_w: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(img.channels * out_h * out_w);
    let sy = crop.height as f32 / out_h as f32;
    let sx = crop.width as f32 / out_w as f32;
    let coord = |d: usize, scale: f32, len: usize| {
        let src = ((d as f32 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f32);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f32)
    };
    for c in 0..img.channels {
        for y in 0..out_h {
            let (y0, y1, fy) = coord(y, sy, crop.height);
            for x in 0..out_w {
                let (x0, x1, fx) = coord(x, sx, crop.width);
                let p = |yy: usize, xx: usize| img.get(n, c, crop.top + yy, crop.left + xx);
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Random resized crop, horizontal flip, then per-channel normalization.
///
/// Randomness is consumed image by image in ascending order.
pub fn random_resize_crop_flip(
    img: &ImageBatch,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<ImageBatch, ImageError> {
    cfg.validate()?;
    let mut parts = Vec::with_capacity(img.count);
    for n in 0..img.count {
        let crop = sample_crop(img.height, img.width, cfg, rng);
        let flip = rng.random::<f32>() < cfg.hflip_prob;
        let pixels = resize_crop(img, n, crop, img.height, img.width);
        let mut one = ImageBatch::new(1, img.channels, img.height, img.width, pixels)?;
        if flip {
            one = one.hflip();
        }
        parts.push(one);
    }
    Ok(normalize(&ImageBatch::stack(&parts)?, cfg))
}

/// `(x - mean_c) / std_c` per channel.
pub fn normalize(img: &ImageBatch, cfg: &AugmentConfig) -> ImageBatch {
    let mut out = img.clone();
    let plane = img.height * img.width;
    for (i, chunk) in out.pixels.chunks_mut(plane).enumerate() {
        let (m, s) = cfg.channel_stats(i % img.channels);
        chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    out
}

/// Inverse of [`normalize`].
pub fn denormalize(img: &ImageBatch, cfg: &AugmentConfig) -> ImageBatch {
    let mut out = img.clone();
    let plane = img.height * img.width;
    for (i, chunk) in out.pixels.chunks_mut(plane).enumerate() {
        let (m, s) = cfg.channel_stats(i % img.channels);
        chunk.iter_mut().for_each(|v| *v = *v * s + m);
    }
    out
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, ImageError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ImageError::Malformed {
                offset: start,
                reason: format!("expected {what}"),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::Malformed {
                offset: start,
                reason: format!("{what} out of range"),
            })
    }
}

/// Decode a binary P6 (RGB) or P5 (grayscale) image with maxval ≤ 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<ImageBatch, ImageError> {
    if bytes.len() < 2 {
        return Err(ImageError::Malformed {
            offset: 0,
            reason: "missing magic".into(),
        });
    }
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        other => {
            return Err(ImageError::BadMagic {
                found: other.to_vec(),
            })
        }
    };
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(ImageError::Malformed {
            offset: r.pos,
            reason: format!("unsupported maxval {maxval}"),
        });
    }
    if width == 0 || height == 0 {
        return Err(ImageError::Malformed {
            offset: r.pos,
            reason: "zero image dimension".into(),
        });
    }
    match bytes.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        _ => {
            return Err(ImageError::Malformed {
                offset: r.pos,
                reason: "expected whitespace before payload".into(),
            })
        }
    }
    let expected = width * height * channels;
    let payload = &bytes[r.pos..];
    if payload.len() < expected {
        return Err(ImageError::Truncated {
            offset: r.pos + payload.len(),
            expected,
            found: payload.len(),
        });
    }
    let mut img = ImageBatch::zeros(1, channels, height, width);
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let v = payload[(y * width + x) * channels + c] as f32 / maxval as f32;
                let idx = img.index(0, c, y, x);
                img.pixels[idx] = v;
            }
        }
    }
    Ok(img)
}

/// Encode image `n` as P6 (3 channels) or P5 (1 channel), clamping to `[0, 1]`.
pub fn encode_pnm(img: &ImageBatch, n: usize) -> Result<Vec<u8>, ImageError> {
    let magic = match img.channels {
        3 => "P6",
        1 => "P5",
        c => {
            return Err(ImageError::Invalid(format!(
                "PNM needs 1 or 3 channels, got {c}"
            )))
        }
    };
    if n >= img.count {
        return Err(ImageError::Invalid(format!(
            "image index {n} out of range for batch of {}",
            img.count
        )));
    }
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                out.push((img.get(n, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<ImageBatch, ImageError> {
    decode_pnm(&fs::read(path)?)
}

/// Writes the first image of `img`.
pub fn save_ppm(path: impl AsRef<Path>, img: &ImageBatch) -> Result<(), ImageError> {
    fs::write(path, encode_pnm(img, 0)?)?;
    Ok(())
}

const RAW_MAGIC: &[u8; 4] = b"SIMB";
const RAW_VERSION: u32 = 1;
const RAW_HEADER: usize = 4 + 4 + 16;

pub fn encode_raw_batch(img: &ImageBatch) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAW_HEADER + img.pixels.len() * 4);
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&RAW_VERSION.to_le_bytes());
    for d in [img.count, img.channels, img.height, img.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &img.pixels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw_batch(bytes: &[u8]) -> Result<ImageBatch, ImageError> {
    if bytes.len() < 4 || &bytes[..4] != RAW_MAGIC {
        return Err(ImageError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < RAW_HEADER {
        return Err(ImageError::Truncated {
            offset: bytes.len(),
            expected: RAW_HEADER,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4-byte slice"));
    let version = word(4);
    if version != RAW_VERSION {
        return Err(ImageError::UnsupportedVersion(version));
    }
    let dims = [
        word(8) as usize,
        word(12) as usize,
        word(16) as usize,
        word(20) as usize,
    ];
    let expected = dims.iter().product::<usize>();
    let payload = &bytes[RAW_HEADER..];
    if payload.len() != expected * 4 {
        return Err(ImageError::PayloadMismatch {
            declared: dims,
            expected,
            found: payload.len() / 4,
        });
    }
    let pixels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    ImageBatch::new(dims[0], dims[1], dims[2], dims[3], pixels)
}

pub fn save_raw_batch(path: impl AsRef<Path>, img: &ImageBatch) -> Result<(), ImageError> {
    fs::write(path, encode_raw_batch(img))?;
    Ok(())
}

pub fn load_raw_batch(path: impl AsRef<Path>) -> Result<ImageBatch, ImageError> {
    decode_raw_batch(&fs::read(path)?)
}

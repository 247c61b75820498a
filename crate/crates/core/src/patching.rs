//! Image ↔ patch serialization, fixed 2-D sin-cos position tables, Gaussian
//! target smoothing, and per-patch target normalization.

use thiserror::Error;

use crate::imageio::ImageBatch;
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatchError {
    #[error("image {height}x{width} is not divisible by patch size {patch}")]
    Indivisible {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("embedding dimension {0} must be a positive multiple of 4")]
    EmbedDim(usize),
    #[error("kernel size {0} must be odd and at least 1")]
    KernelSize(usize),
    #[error("sigma {0} must be positive")]
    Sigma(f64),
    #[error("kernel radius {radius} does not fit a {height}x{width} image")]
    KernelTooLarge {
        radius: usize,
        height: usize,
        width: usize,
    },
    #[error("patch sequences disagree in geometry")]
    Geometry,
}

/// Flattened patches of one image, grid row-major; within a patch the pixel
/// order is row-major with channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// `n_tokens × patch_dim` values.
    pub values: Vec<f32>,
}

impl PatchSequence {
    pub fn n_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let d = self.patch_dim();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn patch_mut(&mut self, i: usize) -> &mut [f32] {
        let d = self.patch_dim();
        &mut self.values[i * d..(i + 1) * d]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.n_tokens(), self.patch_dim()], |i| {
            T::lit(self.values[i] as f64)
        })
    }

    /// Same geometry, new values (e.g. model predictions).
    pub fn with_values<T: Scalar>(&self, values: &Tensor<T>) -> PatchSequence {
        PatchSequence {
            values: values
                .data()
                .iter()
                .map(|v| v.to_f64_lossy() as f32)
                .collect(),
            ..self.clone()
        }
    }
}

/// Split every image of the batch into `patch_size`-square patches.
pub fn patchify(img: &ImageBatch, patch_size: usize) -> Result<Vec<PatchSequence>, PatchError> {
    if patch_size == 0
        || !img.height.is_multiple_of(patch_size)
        || !img.width.is_multiple_of(patch_size)
    {
        return Err(PatchError::Indivisible {
            height: img.height,
            width: img.width,
            patch: patch_size,
        });
    }
    let (gh, gw, p, ch) = (
        img.height / patch_size,
        img.width / patch_size,
        patch_size,
        img.channels,
    );
    Ok((0..img.count)
        .map(|n| {
            let mut values = Vec::with_capacity(img.image_len());
            for gy in 0..gh {
                for gx in 0..gw {
                    for py in 0..p {
                        for px in 0..p {
                            for c in 0..ch {
                                values.push(img.get(n, c, gy * p + py, gx * p + px));
                            }
                        }
                    }
                }
            }
            PatchSequence {
                grid_h: gh,
                grid_w: gw,
                patch_size: p,
                channels: ch,
                values,
            }
        })
        .collect())
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(seqs: &[PatchSequence]) -> Result<ImageBatch, PatchError> {
    let first = seqs.first().ok_or(PatchError::Geometry)?;
    let (gh, gw, p, ch) = (first.grid_h, first.grid_w, first.patch_size, first.channels);
    let mut img = ImageBatch::zeros(seqs.len(), ch, gh * p, gw * p);
    for (n, s) in seqs.iter().enumerate() {
        if (s.grid_h, s.grid_w, s.patch_size, s.channels) != (gh, gw, p, ch)
            || s.values.len() != img.image_len()
        {
            return Err(PatchError::Geometry);
        }
        let mut it = s.values.iter();
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..p {
                    for px in 0..p {
                        for c in 0..ch {
                            let idx = img.index(n, c, gy * p + py, gx * p + px);
                            img.pixels[idx] = *it.next().expect("length checked");
                        }
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Fixed `n_tokens × embed_dim` positional table.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionTable {
    pub grid_h: usize,
    pub grid_w: usize,
    pub embed_dim: usize,
    pub values: Vec<f64>,
}

impl PositionTable {
    pub fn row(&self, token: usize) -> &[f64] {
        &self.values[token * self.embed_dim..(token + 1) * self.embed_dim]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.grid_h * self.grid_w, self.embed_dim], |i| {
            T::lit(self.values[i])
        })
    }
}

/// `[sin(pos·ω_k)…, cos(pos·ω_k)…]` with `ω_k = 10000^(-2k/dim)`, `k < dim/2`.
fn sincos_1d(pos: f64, dim: usize, out: &mut Vec<f64>) {
    let half = dim / 2;
    let omega = |k: usize| 1.0 / 10000f64.powf(2.0 * k as f64 / dim as f64);
    out.extend((0..half).map(|k| (pos * omega(k)).sin()));
    out.extend((0..half).map(|k| (pos * omega(k)).cos()));
}

/// 2-D sin-cos table: the first half of each row encodes the grid row, the
/// second half the grid column.
pub fn sincos_table(
    grid_h: usize,
    grid_w: usize,
    embed_dim: usize,
) -> Result<PositionTable, PatchError> {
    if embed_dim == 0 || !embed_dim.is_multiple_of(4) {
        return Err(PatchError::EmbedDim(embed_dim));
    }
    let mut values = Vec::with_capacity(grid_h * grid_w * embed_dim);
    for r in 0..grid_h {
        for c in 0..grid_w {
            sincos_1d(r as f64, embed_dim / 2, &mut values);
            sincos_1d(c as f64, embed_dim / 2, &mut values);
        }
    }
    Ok(PositionTable {
        grid_h,
        grid_w,
        embed_dim,
        values,
    })
}

/// Normalized `size × size` Gaussian filter.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel {
    pub size: usize,
    pub sigma: f64,
    pub weights: Vec<f64>,
}

impl GaussianKernel {
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.size + j]
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }
}

pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<GaussianKernel, PatchError> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(PatchError::KernelSize(size));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(PatchError::Sigma(sigma));
    }
    let c = (size / 2) as f64;
    let mut weights: Vec<f64> = (0..size * size)
        .map(|idx| {
            let (i, j) = ((idx / size) as f64, (idx % size) as f64);
            (-((i - c).powi(2) + (j - c).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(GaussianKernel {
        size,
        sigma,
        weights,
    })
}

/// Reflect index into `[0, len)` without repeating the edge sample.
fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Per-channel 2-D convolution with reflect padding; shape preserved.
pub fn smooth(img: &ImageBatch, k: &GaussianKernel) -> Result<ImageBatch, PatchError> {
    let r = k.radius();
    if r >= img.height || r >= img.width {
        return Err(PatchError::KernelTooLarge {
            radius: r,
            height: img.height,
            width: img.width,
        });
    }
    let mut out = img.clone();
    for n in 0..img.count {
        for c in 0..img.channels {
            for y in 0..img.height {
                for x in 0..img.width {
                    let mut acc = 0.0f64;
                    for i in 0..k.size {
                        let yy = reflect(y as isize + i as isize - r as isize, img.height);
                        for j in 0..k.size {
                            let xx = reflect(x as isize + j as isize - r as isize, img.width);
                            acc += k.weight(i, j) * img.get(n, c, yy, xx) as f64;
                        }
                    }
                    let idx = img.index(n, c, y, x);
                    out.pixels[idx] = acc as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Variance floor for per-patch target normalization.
pub const NORM_PIX_EPS: f64 = 1e-6;

/// Per-patch `(mean, sqrt(var + eps))`.
pub fn patch_stats(seq: &PatchSequence) -> Vec<(f32, f32)> {
    (0..seq.n_tokens())
        .map(|i| {
            let p = seq.patch(i);
            let n = p.len() as f64;
            let mean = p.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = p.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            (mean as f32, (var + NORM_PIX_EPS).sqrt() as f32)
        })
        .collect()
}

/// `(x - mean) / sqrt(var + 1e-6)`, statistics per patch.
pub fn normalize_patch(seq: &PatchSequence) -> PatchSequence {
    let mut out = seq.clone();
    for (i, (mean, std)) in patch_stats(seq).into_iter().enumerate() {
        out.patch_mut(i)
            .iter_mut()
            .for_each(|v| *v = (*v - mean) / std);
    }
    out
}

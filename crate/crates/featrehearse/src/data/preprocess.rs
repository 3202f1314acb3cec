//! Pixel normalization and training-time augmentation.
//!
//! Channel statistics are computed once on the first task's training data and
//! frozen for the rest of the run, so later tasks see the same input mapping.

use super::dataset::{ImageShape, ImageSource};
use crate::error::{Error, Result};
use crate::real::Real;
use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Per-channel mean and standard deviation of pixel intensities in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Population statistics over the given rows of a source.
    pub fn compute<S: ImageSource>(src: &S, indices: &[u32]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset(
                "cannot compute channel statistics from zero images".into(),
            ));
        }
        let shape = src.shape();
        let plane = shape.height * shape.width;
        let mut sum = vec![0.0f64; shape.channels];
        let mut sum_sq = vec![0.0f64; shape.channels];
        let mut buf = vec![0u8; shape.pixel_count()];
        for &i in indices {
            src.read_image(i as usize, &mut buf);
            for c in 0..shape.channels {
                for &b in &buf[c * plane..(c + 1) * plane] {
                    let v = b as f64 / 255.0;
                    sum[c] += v;
                    sum_sq[c] += v * v;
                }
            }
        }
        let n = (indices.len() * plane) as f64;
        let mut mean = Vec::with_capacity(shape.channels);
        let mut std = Vec::with_capacity(shape.channels);
        for c in 0..shape.channels {
            let m = sum[c] / n;
            let var = (sum_sq[c] / n - m * m).max(0.0);
            let s = var.sqrt();
            mean.push(m as f32);
            std.push(if s < 1e-6 { 1.0 } else { s as f32 });
        }
        Ok(Self { mean, std })
    }
}

/// Training-time augmentation policy applied to raw pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Augment {
    /// Use images as stored.
    None,
    /// Random shifts via zero-padding and cropping; optional horizontal
    /// mirroring (disable for digit-like classes where mirroring changes
    /// identity).
    FlipCrop { pad: usize, flip: bool },
}

/// Copies the given rows into one contiguous CHW buffer.
pub fn gather_raw<S: ImageSource>(src: &S, indices: &[u32]) -> Vec<u8> {
    let n = src.shape().pixel_count();
    let mut raw = vec![0u8; indices.len() * n];
    for (slot, &i) in indices.iter().enumerate() {
        src.read_image(i as usize, &mut raw[slot * n..(slot + 1) * n]);
    }
    raw
}

/// Applies the augmentation policy in place, one draw sequence per image.
pub fn augment_batch(
    raw: &mut [u8],
    count: usize,
    shape: ImageShape,
    augment: Augment,
    rng: &mut ChaCha8Rng,
) {
    let Augment::FlipCrop { pad, flip } = augment else {
        return;
    };
    let (h, w) = (shape.height, shape.width);
    let plane = h * w;
    let size = shape.pixel_count();
    let mut scratch = vec![0u8; size];
    for img in 0..count {
        let buf = &mut raw[img * size..(img + 1) * size];
        if flip && rng.gen::<bool>() {
            for c in 0..shape.channels {
                for y in 0..h {
                    buf[c * plane + y * w..c * plane + (y + 1) * w].reverse();
                }
            }
        }
        if pad > 0 {
            let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
            let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
            if dy != 0 || dx != 0 {
                scratch.copy_from_slice(buf);
                for c in 0..shape.channels {
                    for y in 0..h as isize {
                        for x in 0..w as isize {
                            let (sy, sx) = (y + dy, x + dx);
                            let v = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                scratch[c * plane + sy as usize * w + sx as usize]
                            } else {
                                0
                            };
                            buf[c * plane + y as usize * w + x as usize] = v;
                        }
                    }
                }
            }
        }
    }
}

/// Converts a raw CHW byte buffer into a normalized (N, C, H, W) tensor.
pub fn normalize_batch<F: Real>(
    raw: &[u8],
    count: usize,
    shape: ImageShape,
    stats: &ChannelStats,
) -> Array4<F> {
    let plane = shape.height * shape.width;
    let size = shape.pixel_count();
    debug_assert_eq!(raw.len(), count * size);
    let inv_std: Vec<F> = stats.std.iter().map(|&s| F::from_f64(1.0 / s as f64)).collect();
    let mean: Vec<F> = stats.mean.iter().map(|&m| F::from_f64(m as f64)).collect();
    let scale = F::from_f64(1.0 / 255.0);
    let mut out = Vec::with_capacity(raw.len());
    for img in 0..count {
        for c in 0..shape.channels {
            let base = img * size + c * plane;
            for &b in &raw[base..base + plane] {
                out.push((F::from_f64(b as f64) * scale - mean[c]) * inv_std[c]);
            }
        }
    }
    Array4::from_shape_vec((count, shape.channels, shape.height, shape.width), out)
        .expect("buffer length matches shape by construction")
}

/// Fetches and normalizes the given rows without augmentation.
pub fn gather_batch<F: Real, S: ImageSource>(
    src: &S,
    indices: &[u32],
    stats: &ChannelStats,
) -> Array4<F> {
    let raw = gather_raw(src, indices);
    normalize_batch(&raw, indices.len(), src.shape(), stats)
}

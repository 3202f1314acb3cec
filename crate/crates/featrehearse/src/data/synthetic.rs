//! Deterministic synthetic digit corpus.
//!
//! Renders the ten digit glyphs as anti-aliased stroke sets under random
//! affine jitter plus pixel noise, producing an MNIST-shaped dataset
//! (single channel, ten classes) from nothing but a seed. Used when the
//! real IDX files are not present in the data root.

use super::dataset::{ImageShape, LabeledDataset};
use crate::error::Result;
use crate::rng::stream_rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub side: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train_per_class: 600,
            test_per_class: 100,
            side: 28,
            seed: 20_240_613,
        }
    }
}

type Polyline = &'static [(f32, f32)];

/// Stroke skeletons in a unit glyph box (x right, y down).
fn glyph(digit: u32) -> &'static [Polyline] {
    const D0: &[Polyline] = &[&[
        (0.50, 0.10), (0.74, 0.18), (0.80, 0.50), (0.74, 0.82), (0.50, 0.90),
        (0.26, 0.82), (0.20, 0.50), (0.26, 0.18), (0.50, 0.10),
    ]];
    const D1: &[Polyline] = &[
        &[(0.35, 0.28), (0.55, 0.10), (0.55, 0.90)],
        &[(0.38, 0.90), (0.72, 0.90)],
    ];
    const D2: &[Polyline] = &[
        &[(0.22, 0.30), (0.30, 0.14), (0.58, 0.10), (0.76, 0.22), (0.74, 0.42), (0.22, 0.88)],
        &[(0.22, 0.88), (0.80, 0.88)],
    ];
    const D3: &[Polyline] = &[&[
        (0.24, 0.16), (0.56, 0.10), (0.74, 0.26), (0.52, 0.46), (0.76, 0.66),
        (0.60, 0.88), (0.24, 0.84),
    ]];
    const D4: &[Polyline] = &[&[(0.64, 0.90), (0.64, 0.10), (0.20, 0.62), (0.82, 0.62)]];
    const D5: &[Polyline] = &[&[
        (0.72, 0.12), (0.28, 0.12), (0.24, 0.46), (0.58, 0.42), (0.78, 0.60),
        (0.66, 0.86), (0.26, 0.88),
    ]];
    const D6: &[Polyline] = &[&[
        (0.66, 0.12), (0.38, 0.30), (0.26, 0.58), (0.34, 0.84), (0.62, 0.88),
        (0.74, 0.66), (0.58, 0.50), (0.30, 0.58),
    ]];
    const D7: &[Polyline] = &[
        &[(0.22, 0.12), (0.78, 0.12), (0.42, 0.90)],
        &[(0.34, 0.52), (0.66, 0.52)],
    ];
    const D8: &[Polyline] = &[
        &[(0.50, 0.10), (0.70, 0.20), (0.66, 0.42), (0.50, 0.50), (0.34, 0.42), (0.30, 0.20), (0.50, 0.10)],
        &[(0.50, 0.50), (0.72, 0.62), (0.68, 0.84), (0.50, 0.90), (0.32, 0.84), (0.28, 0.62), (0.50, 0.50)],
    ];
    const D9: &[Polyline] = &[
        &[(0.68, 0.16), (0.44, 0.10), (0.28, 0.26), (0.34, 0.44), (0.58, 0.48), (0.70, 0.34), (0.68, 0.16)],
        &[(0.70, 0.22), (0.64, 0.90)],
    ];
    match digit {
        0 => D0,
        1 => D1,
        2 => D2,
        3 => D3,
        4 => D4,
        5 => D5,
        6 => D6,
        7 => D7,
        8 => D8,
        _ => D9,
    }
}

fn dist_to_segment(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq <= 1e-12 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len_sq).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn render(digit: u32, side: usize, rng: &mut ChaCha8Rng, out: &mut [u8]) {
    // Forward map: image = A * (glyph - 0.5) + 0.5 + shift. Pixels sample the
    // inverse so strokes stay crisp.
    let theta = rng.gen_range(-0.22..0.22f32);
    let sx = rng.gen_range(0.82..1.12f32);
    let sy = rng.gen_range(0.82..1.12f32);
    let shear = rng.gen_range(-0.15..0.15f32);
    let tx = rng.gen_range(-0.06..0.06f32);
    let ty = rng.gen_range(-0.06..0.06f32);
    let thick = rng.gen_range(0.050..0.085f32);
    let peak = rng.gen_range(190.0..255.0f32);

    let (cos, sin) = (theta.cos(), theta.sin());
    // A = rotation * shear * scale
    let a00 = cos * sx - sin * shear * sx;
    let a01 = cos * shear * sy - sin * sy;
    let a10 = sin * sx + cos * shear * sx;
    let a11 = sin * shear * sy + cos * sy;
    let det = a00 * a11 - a01 * a10;
    let (i00, i01, i10, i11) = (a11 / det, -a01 / det, -a10 / det, a00 / det);

    let segs: Vec<((f32, f32), (f32, f32))> = glyph(digit)
        .iter()
        .flat_map(|line| line.windows(2).map(|w| (w[0], w[1])))
        .collect();

    let soft = 0.030f32;
    let inv_side = 1.0 / side as f32;
    for py in 0..side {
        for px in 0..side {
            let u = (px as f32 + 0.5) * inv_side - 0.5 - tx;
            let v = (py as f32 + 0.5) * inv_side - 0.5 - ty;
            let gx = i00 * u + i01 * v + 0.5;
            let gy = i10 * u + i11 * v + 0.5;
            let mut best = f32::MAX;
            for &(a, b) in &segs {
                best = best.min(dist_to_segment((gx, gy), a, b));
                if best <= thick - soft {
                    break;
                }
            }
            let ink = ((thick - best) / soft).clamp(0.0, 1.0);
            let noise = rng.gen_range(-12.0..12.0f32);
            out[py * side + px] = (ink * peak + noise).clamp(0.0, 255.0) as u8;
        }
    }
}

fn build_split(spec: &SyntheticSpec, tag: &str, per_class: usize) -> Result<LabeledDataset> {
    let side = spec.side;
    let mut pixels = Vec::with_capacity(per_class * 10 * side * side);
    let mut labels = Vec::with_capacity(per_class * 10);
    let mut buf = vec![0u8; side * side];
    for digit in 0..10u32 {
        let mut rng = stream_rng(spec.seed, tag, digit as u64);
        for _ in 0..per_class {
            render(digit, side, &mut rng, &mut buf);
            pixels.extend_from_slice(&buf);
            labels.push(digit);
        }
    }
    LabeledDataset::new(
        ImageShape {
            channels: 1,
            height: side,
            width: side,
        },
        pixels,
        labels,
        10,
    )
}

/// Generates (train, test) splits. Both are pure functions of the spec.
pub fn synthetic_digits(spec: &SyntheticSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    Ok((
        build_split(spec, "synthetic/train", spec.train_per_class)?,
        build_split(spec, "synthetic/test", spec.test_per_class)?,
    ))
}

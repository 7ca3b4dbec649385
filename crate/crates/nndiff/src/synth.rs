//! Deterministic synthetic handwritten-digit corpus.
//!
//! Procedurally rendered 28x28 grayscale digits: per-class stroke
//! skeletons drawn with random affine jitter (rotation, scale, shear,
//! translation), stroke thickness, ink level, and pixel noise. The same
//! (seed, index) pair always renders the same image, so corpora are
//! reproducible across runs and machines without shipping data files.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::error::Result;
use crate::tensor::Tensor;

pub const SIDE: usize = 28;

type Polyline = &'static [(f64, f64)];

// Stroke skeletons in a unit box, y pointing down.
const ZERO: &[Polyline] = &[&[
    (0.50, 0.15),
    (0.66, 0.22),
    (0.72, 0.40),
    (0.72, 0.60),
    (0.66, 0.78),
    (0.50, 0.85),
    (0.34, 0.78),
    (0.28, 0.60),
    (0.28, 0.40),
    (0.34, 0.22),
    (0.50, 0.15),
]];
const ONE: &[Polyline] = &[&[(0.38, 0.28), (0.52, 0.15), (0.52, 0.85)]];
const TWO: &[Polyline] = &[&[
    (0.30, 0.30),
    (0.36, 0.18),
    (0.54, 0.14),
    (0.68, 0.22),
    (0.70, 0.36),
    (0.52, 0.56),
    (0.30, 0.82),
    (0.72, 0.82),
]];
const THREE: &[Polyline] = &[&[
    (0.32, 0.20),
    (0.50, 0.14),
    (0.66, 0.22),
    (0.66, 0.38),
    (0.48, 0.48),
    (0.66, 0.56),
    (0.68, 0.72),
    (0.52, 0.84),
    (0.32, 0.78),
]];
const FOUR: &[Polyline] = &[
    &[(0.58, 0.12), (0.28, 0.60), (0.78, 0.60)],
    &[(0.62, 0.32), (0.62, 0.88)],
];
const FIVE: &[Polyline] = &[&[
    (0.68, 0.15),
    (0.34, 0.15),
    (0.34, 0.46),
    (0.54, 0.42),
    (0.68, 0.52),
    (0.68, 0.68),
    (0.52, 0.82),
    (0.32, 0.76),
]];
const SIX: &[Polyline] = &[&[
    (0.64, 0.16),
    (0.45, 0.22),
    (0.34, 0.42),
    (0.33, 0.62),
    (0.40, 0.80),
    (0.58, 0.84),
    (0.68, 0.70),
    (0.62, 0.54),
    (0.44, 0.50),
    (0.33, 0.62),
]];
const SEVEN: &[Polyline] = &[&[(0.30, 0.16), (0.70, 0.16), (0.42, 0.84)]];
const EIGHT: &[Polyline] = &[
    &[
        (0.50, 0.14),
        (0.64, 0.22),
        (0.64, 0.38),
        (0.50, 0.46),
        (0.36, 0.38),
        (0.36, 0.22),
        (0.50, 0.14),
    ],
    &[
        (0.50, 0.46),
        (0.67, 0.56),
        (0.67, 0.74),
        (0.50, 0.84),
        (0.33, 0.74),
        (0.33, 0.56),
        (0.50, 0.46),
    ],
];
const NINE: &[Polyline] = &[
    &[
        (0.50, 0.14),
        (0.66, 0.22),
        (0.67, 0.38),
        (0.52, 0.48),
        (0.36, 0.40),
        (0.35, 0.24),
        (0.50, 0.14),
    ],
    &[(0.66, 0.30), (0.63, 0.85)],
];

const SKELETONS: [&[Polyline]; 10] = [
    ZERO, ONE, TWO, THREE, FOUR, FIVE, SIX, SEVEN, EIGHT, NINE,
];

/// Renders one digit image with everything jittered by the sample rng.
fn render(class: usize, rng: &mut ChaCha8Rng, noise: f64) -> Vec<f64> {
    let theta = rng.gen_range(-0.15..0.15f64);
    let scale_x = rng.gen_range(0.85..1.08);
    let scale_y = rng.gen_range(0.85..1.08);
    let shear = rng.gen_range(-0.12..0.12);
    let tx = rng.gen_range(-1.8..1.8);
    let ty = rng.gen_range(-1.8..1.8);
    let thickness = rng.gen_range(1.1..1.8);
    let ink = rng.gen_range(0.78..1.0);

    let (sin, cos) = theta.sin_cos();
    let extent = SIDE as f64 * 0.92;
    let transform = |(ux, uy): (f64, f64)| -> (f64, f64) {
        let cx = ux - 0.5;
        let cy = uy - 0.5;
        let sx = (cx + shear * cy) * scale_x;
        let sy = cy * scale_y;
        let rx = cos * sx - sin * sy;
        let ry = sin * sx + cos * sy;
        (
            rx * extent + SIDE as f64 / 2.0 + tx,
            ry * extent + SIDE as f64 / 2.0 + ty,
        )
    };

    let segments: Vec<((f64, f64), (f64, f64))> = SKELETONS[class]
        .iter()
        .flat_map(|line| {
            line.windows(2)
                .map(|pair| (transform(pair[0]), transform(pair[1])))
                .collect::<Vec<_>>()
        })
        .collect();

    let mut pixels = vec![0.0f64; SIDE * SIDE];
    for py in 0..SIDE {
        for px in 0..SIDE {
            let p = (px as f64 + 0.5, py as f64 + 0.5);
            let mut d = f64::INFINITY;
            for (a, b) in &segments {
                d = d.min(point_segment_distance(p, *a, *b));
            }
            let v = ((thickness - d) / 1.2 + 0.5).clamp(0.0, 1.0) * ink;
            pixels[py * SIDE + px] = v;
        }
    }
    if noise > 0.0 {
        for v in &mut pixels {
            *v = (*v + gaussian(rng) * noise).clamp(0.0, 1.0);
        }
    }
    pixels
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (px, py) = p;
    let (ax, ay) = a;
    let (bx, by) = b;
    let dx = bx - ax;
    let dy = by - ay;
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let cx = ax + t * dx - px;
    let cy = ay + t * dy - py;
    (cx * cx + cy * cy).sqrt()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// A balanced corpus of `count` digits (classes cycle 0..9), shape
/// `[N, 1, 28, 28]`, pixels in [0,1].
pub fn synth_digits(count: usize, seed: u64, noise: f64) -> Result<Dataset> {
    let mut data = Vec::with_capacity(count * SIDE * SIDE);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % 10;
        let mut rng = sample_rng(seed, i as u64);
        data.extend(render(class, &mut rng, noise));
        labels.push(class);
    }
    Dataset::new(Tensor::new(vec![count, 1, SIDE, SIDE], data)?, labels)
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

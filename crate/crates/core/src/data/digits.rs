//! Procedurally drawn handwritten-style digits on a 28x28 canvas.
//!
//! Each class is a fixed set of strokes in a unit box. A sample applies a
//! random scale, rotation, shear, translation and stroke width, then
//! rasterizes with an anti-aliased distance-to-stroke falloff. Background
//! pixels are exactly zero, as in MNIST.

use std::f64::consts::PI;

use rand::Rng;

use super::{Dataset, Example, TaskKind};
use crate::seed::{derive_seed, purpose, rng};
use crate::tensor::Tensor;

const SIZE: usize = 28;

type Stroke = Vec<(f64, f64)>;

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64, n: usize) -> Stroke {
    (0..=n)
        .map(|i| {
            let a = from + (to - from) * i as f64 / n as f64;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

fn glyph(digit: usize) -> Vec<Stroke> {
    match digit {
        0 => vec![ellipse(0.5, 0.5, 0.28, 0.42, 0.0, 2.0 * PI, 20)],
        1 => vec![vec![(0.35, 0.25), (0.55, 0.08), (0.55, 0.92)]],
        2 => vec![vec![
            (0.2, 0.3),
            (0.3, 0.12),
            (0.5, 0.06),
            (0.7, 0.12),
            (0.78, 0.3),
            (0.7, 0.48),
            (0.2, 0.92),
            (0.82, 0.92),
        ]],
        3 => vec![vec![
            (0.2, 0.12),
            (0.7, 0.1),
            (0.78, 0.28),
            (0.5, 0.47),
            (0.8, 0.65),
            (0.75, 0.86),
            (0.5, 0.94),
            (0.2, 0.86),
        ]],
        4 => vec![vec![(0.65, 0.92), (0.65, 0.08), (0.15, 0.65), (0.85, 0.65)]],
        5 => vec![vec![
            (0.8, 0.08),
            (0.28, 0.08),
            (0.24, 0.45),
            (0.55, 0.4),
            (0.78, 0.55),
            (0.76, 0.8),
            (0.5, 0.94),
            (0.2, 0.86),
        ]],
        6 => vec![vec![
            (0.72, 0.1),
            (0.45, 0.15),
            (0.28, 0.4),
            (0.25, 0.7),
            (0.4, 0.92),
            (0.65, 0.9),
            (0.75, 0.7),
            (0.6, 0.52),
            (0.35, 0.55),
            (0.26, 0.68),
        ]],
        7 => vec![vec![(0.18, 0.1), (0.82, 0.1), (0.45, 0.92)]],
        8 => vec![
            ellipse(0.5, 0.28, 0.2, 0.19, 0.0, 2.0 * PI, 16),
            ellipse(0.5, 0.7, 0.24, 0.22, 0.0, 2.0 * PI, 16),
        ],
        9 => vec![
            ellipse(0.5, 0.32, 0.22, 0.22, 0.0, 2.0 * PI, 16),
            vec![(0.72, 0.32), (0.62, 0.92)],
        ],
        _ => panic!("digit {digit} out of range"),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Draws one digit as a `[1, 28, 28]` tensor with values in `[0, 1]`.
pub fn render_digit(digit: usize, rng: &mut impl Rng) -> Tensor {
    let scale = rng.random_range(16.0..20.0);
    let aspect = rng.random_range(0.8..1.1);
    let angle: f64 = rng.random_range(-0.2..0.2);
    let shear = rng.random_range(-0.25..0.25);
    let (tx, ty) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
    let width = rng.random_range(1.0..1.8);
    let ink = rng.random_range(0.8..1.0);
    let (sin, cos) = angle.sin_cos();
    let c = SIZE as f64 / 2.0;
    let strokes: Vec<Stroke> = glyph(digit)
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|(x, y)| {
                    let (u, v) = ((x - 0.5) * scale * aspect, (y - 0.5) * scale);
                    let u = u + shear * v;
                    (c + tx + cos * u - sin * v, c + ty + sin * u + cos * v)
                })
                .collect()
        })
        .collect();
    let mut data = vec![0.0; SIZE * SIZE];
    for (i, px) in data.iter_mut().enumerate() {
        let p = ((i % SIZE) as f64 + 0.5, (i / SIZE) as f64 + 0.5);
        let d = strokes
            .iter()
            .flat_map(|s| s.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
            .fold(f64::INFINITY, f64::min);
        let v = (width + 0.5 - d).clamp(0.0, 1.0) * ink;
        *px = (v * 255.0).round() / 255.0;
    }
    Tensor::from_parts(vec![1, SIZE, SIZE], data)
}

/// `n_train + n_test` digits with labels cycling through 0..9 and a
/// seed-determined draw for each example.
pub fn generate_synthetic_digits(seed: u64, n_train: usize, n_test: usize) -> Dataset {
    let make = |split: u64, n: usize| -> Vec<Example> {
        (0..n)
            .map(|i| {
                let label = i % 10;
                let mut r = rng(derive_seed(seed, &[purpose::DATA, split, i as u64]));
                Example {
                    input: render_digit(label, &mut r),
                    label,
                }
            })
            .collect()
    };
    Dataset {
        task: TaskKind::Image,
        num_classes: 10,
        train: make(0, n_train),
        test: make(1, n_test),
        vocab: None,
    }
}

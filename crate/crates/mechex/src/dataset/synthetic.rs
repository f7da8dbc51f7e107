//! Procedural stand-in digit corpus.
//!
//! Ten stroke-based glyph classes rendered at 28x28 with per-sample affine
//! jitter and intensity variation. This is not a substitute for real data in
//! benchmark numbers; it exists so the full pipeline (ingestion, training,
//! evaluation, figures) can run and be tested on machines that do not have
//! the IDX files on disk. Deterministic under `(seed, index)`.

use rand::Rng;

use super::{idx, ImageSet, Source, MNIST_RAW_SIDE};
use crate::error::Result;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Real, Tensor};

type Point = (f32, f32);

/// Polyline strokes per glyph class, in a unit box (x right, y down).
fn strokes(class: u8) -> Vec<Vec<Point>> {
    let circle = |cx: f32, cy: f32, rx: f32, ry: f32| -> Vec<Point> {
        (0..=16)
            .map(|i| {
                let a = i as f32 / 16.0 * std::f32::consts::TAU;
                (cx + rx * a.cos(), cy + ry * a.sin())
            })
            .collect()
    };
    match class {
        0 => vec![circle(0.5, 0.5, 0.28, 0.4)],
        1 => vec![vec![(0.35, 0.25), (0.55, 0.1), (0.55, 0.9)]],
        2 => vec![vec![
            (0.25, 0.25),
            (0.4, 0.1),
            (0.65, 0.12),
            (0.72, 0.3),
            (0.6, 0.5),
            (0.25, 0.88),
            (0.75, 0.88),
        ]],
        3 => vec![vec![
            (0.28, 0.15),
            (0.62, 0.12),
            (0.7, 0.3),
            (0.5, 0.48),
            (0.72, 0.65),
            (0.62, 0.88),
            (0.28, 0.85),
        ]],
        4 => vec![
            vec![(0.6, 0.1), (0.25, 0.6), (0.78, 0.6)],
            vec![(0.6, 0.35), (0.6, 0.9)],
        ],
        5 => vec![vec![
            (0.72, 0.12),
            (0.3, 0.12),
            (0.28, 0.45),
            (0.6, 0.42),
            (0.72, 0.62),
            (0.6, 0.88),
            (0.27, 0.85),
        ]],
        6 => vec![
            vec![(0.65, 0.1), (0.38, 0.35), (0.3, 0.65)],
            circle(0.5, 0.68, 0.2, 0.2),
        ],
        7 => vec![vec![(0.25, 0.12), (0.75, 0.12), (0.45, 0.9)]],
        8 => vec![circle(0.5, 0.3, 0.2, 0.19), circle(0.5, 0.7, 0.24, 0.21)],
        _ => vec![
            circle(0.52, 0.32, 0.2, 0.2),
            vec![(0.72, 0.32), (0.68, 0.9)],
        ],
    }
}

fn dist_to_segment(p: Point, a: Point, b: Point) -> f32 {
    let (px, py) = (p.0 - a.0, p.1 - a.1);
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((px * vx + py * vy) / len2).clamp(0.0, 1.0)
    };
    let (dx, dy) = (px - t * vx, py - t * vy);
    (dx * dx + dy * dy).sqrt()
}

fn render(class: u8, side: usize, rng: &mut impl Rng) -> Vec<Real> {
    let angle: f32 = rng.random_range(-0.16..0.16);
    let scale: f32 = rng.random_range(0.78..1.02) * (side as f32 - 4.0);
    let shift_x: f32 = rng.random_range(-1.6..1.6) + side as f32 / 2.0;
    let shift_y: f32 = rng.random_range(-1.6..1.6) + side as f32 / 2.0;
    let peak: f32 = rng.random_range(0.85..1.0);
    let (sin, cos) = angle.sin_cos();

    let place = |(x, y): Point| -> Point {
        let (cx, cy) = (x - 0.5, y - 0.5);
        (
            shift_x + scale * (cos * cx - sin * cy),
            shift_y + scale * (sin * cx + cos * cy),
        )
    };

    let polylines: Vec<Vec<Point>> = strokes(class)
        .into_iter()
        .map(|line| line.into_iter().map(place).collect())
        .collect();

    let thickness = 0.9f32;
    let falloff = 1.1f32;
    let mut img = vec![0.0; side * side];
    for (y, row) in img.chunks_mut(side).enumerate() {
        for (x, px) in row.iter_mut().enumerate() {
            let p = (x as f32, y as f32);
            let mut d = f32::INFINITY;
            for line in &polylines {
                for seg in line.windows(2) {
                    d = d.min(dist_to_segment(p, seg[0], seg[1]));
                }
            }
            let v = if d <= thickness {
                peak
            } else {
                (peak * (1.0 - (d - thickness) / falloff)).max(0.0)
            };
            // 8-bit intensities, matching what the IDX path produces
            *px = (v * 255.0).round() as Real / 255.0;
        }
    }
    img
}

/// A labelled glyph corpus of `n` images at 28x28, classes cycling 0..9.
pub fn synthetic_digits(n: usize, seed: u64) -> Result<ImageSet> {
    let side = MNIST_RAW_SIDE;
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream_rng(seed, Stream::Synthetic, i as u64);
        let class = (rng.random_range(0..10u32)) as u8;
        data.extend_from_slice(&render(class, side, &mut rng));
        labels.push(class);
    }
    ImageSet::new(
        Tensor::new(vec![n, 1, side, side], data)?,
        Some(labels),
        Source::Synthetic,
    )
}

/// Emit the corpus as IDX files (train + test pairs) under `dir`, so the
/// ordinary ingestion path can be exercised without the real distribution.
pub fn write_synthetic_idx(
    dir: &std::path::Path,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (n, offset, img_name, lbl_name) in [
        (n_train, 0u64, "train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        (n_test, 1_000_000, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ] {
        let side = MNIST_RAW_SIDE;
        let mut pixels = Vec::with_capacity(n * side * side);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = stream_rng(seed, Stream::Synthetic, offset + i as u64);
            let class = (rng.random_range(0..10u32)) as u8;
            pixels.extend(render(class, side, &mut rng).iter().map(|&v| (v * 255.0).round() as u8));
            labels.push(class);
        }
        idx::write_idx(&dir.join(img_name), &dir.join(lbl_name), &pixels, &labels, side, side)?;
    }
    Ok(())
}

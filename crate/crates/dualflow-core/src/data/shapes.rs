//! Procedural 16x16 grayscale shape images, 8 classes.
//!
//! Per sample: randomized center, size, stripe phase/period and intensities,
//! plus additive gaussian noise (std 0.02), clamped to [0, 1]. Identical seeds
//! reproduce identical bytes; classes are assigned round-robin so every class
//! count is within one of n/K.

use super::LabeledData;
use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const SHAPE_SIDE: usize = 16;
pub const SHAPE_CLASSES: usize = 8;
const NOISE_STD: f32 = 0.02;

#[derive(Clone, Copy)]
struct Style {
    cx: f32,
    cy: f32,
    r: f32,
    bar: f32,
    fg: f32,
    bg: f32,
    period: usize,
    phase: usize,
}

fn render(class: usize, s: &Style) -> Vec<f32> {
    let mut img = vec![s.bg; SHAPE_SIDE * SHAPE_SIDE];
    for y in 0..SHAPE_SIDE {
        for x in 0..SHAPE_SIDE {
            let dx = x as f32 - s.cx;
            let dy = y as f32 - s.cy;
            let hit = match class {
                // filled square
                0 => dx.abs() <= s.r && dy.abs() <= s.r,
                // hollow square
                1 => {
                    let m = dx.abs().max(dy.abs());
                    m <= s.r && m >= s.r - s.bar
                }
                // disk
                2 => dx * dx + dy * dy <= s.r * s.r,
                // ring
                3 => {
                    let d = (dx * dx + dy * dy).sqrt();
                    d <= s.r && d >= s.r - s.bar
                }
                // plus-cross
                4 => (dx.abs() <= s.bar && dy.abs() <= s.r) || (dy.abs() <= s.bar && dx.abs() <= s.r),
                // x-cross
                5 => {
                    let inside = dx.abs() <= s.r && dy.abs() <= s.r;
                    inside && ((dx - dy).abs() <= s.bar || (dx + dy).abs() <= s.bar)
                }
                // horizontal stripes
                6 => (y + s.phase) / s.period % 2 == 0,
                // vertical stripes
                7 => (x + s.phase) / s.period % 2 == 0,
                _ => unreachable!(),
            };
            if hit {
                img[y * SHAPE_SIDE + x] = s.fg;
            }
        }
    }
    img
}

/// Deterministic, class-balanced shapes corpus: images as [n, 256] rows in
/// [0, 1] plus labels.
pub fn generate_shapes(seed: u64, n: usize) -> Result<LabeledData> {
    if n < SHAPE_CLASSES {
        return Err(CoreError::InvalidArgument(format!(
            "need at least {SHAPE_CLASSES} samples, got {n}"
        )));
    }
    let mut rng = Rng::seed_from(seed).fork(0x5348_4150); // shapes stream
    let mut data = Vec::with_capacity(n * SHAPE_SIDE * SHAPE_SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % SHAPE_CLASSES;
        let style = Style {
            cx: rng.range_f64(5.5, 9.5) as f32,
            cy: rng.range_f64(5.5, 9.5) as f32,
            r: rng.range_f64(3.0, 5.5) as f32,
            bar: rng.range_f64(1.0, 1.8) as f32,
            fg: rng.range_f64(0.55, 0.95) as f32,
            bg: rng.range_f64(0.02, 0.15) as f32,
            period: 2 + rng.below(3),
            phase: rng.below(4),
        };
        let mut img = render(class, &style);
        for px in img.iter_mut() {
            *px = (*px + rng.normal_f32() * NOISE_STD).clamp(0.0, 1.0);
        }
        data.extend_from_slice(&img);
        labels.push(class);
    }
    LabeledData::new(
        Tensor::new(vec![n, SHAPE_SIDE * SHAPE_SIDE], data)?,
        labels,
        SHAPE_CLASSES,
    )
}

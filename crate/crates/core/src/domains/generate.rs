use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::Rng;

use super::dataset::{Dataset, Sample, CLASS_NAMES};
use crate::numerics::rng_from;

pub const IMAGE_SIDE: usize = 16;

const LABEL_TAG: u64 = 0x4c41_4245;
const SAMPLE_TAG: u64 = 0x5341_4d50;

/// Allowed fraction of shape pixels.
pub const MASK_COVERAGE: (f64, f64) = (0.05, 0.60);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub fn from_label(label: usize) -> Shape {
        [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross][label % 4]
    }

    fn contains(self, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            // apex up, base at cy + r
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
            Shape::Cross => {
                let w = r / 3.0;
                (dx.abs() <= w && dy.abs() <= r) || (dy.abs() <= w && dx.abs() <= r)
            }
        }
    }
}

/// Low-frequency sinusoidal texture around a random base level.
fn background<R: Rng>(side: usize, rng: &mut R) -> Vec<f64> {
    let base = rng.random_range(0.1..0.3);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..0.06),
                rng.random_range(0.3..2.0),
                rng.random_range(0.3..2.0),
                rng.random_range(0.0..TAU),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let (y, x) = (i as f64 / side as f64, j as f64 / side as f64);
            let v: f64 = waves.iter().map(|&(a, fx, fy, ph)| a * (TAU * (fx * x + fy * y) + ph).sin()).sum();
            out.push(base + v);
        }
    }
    out
}

fn draw_sample<R: Rng>(label: usize, side: usize, rng: &mut R) -> Sample {
    let shape = Shape::from_label(label);
    let total = (side * side) as f64;
    loop {
        let r = rng.random_range(4.5..6.0);
        let cx = rng.random_range(r..side as f64 - r);
        let cy = rng.random_range(r..side as f64 - r);
        let mask: Vec<bool> = (0..side * side)
            .map(|p| shape.contains((p % side) as f64 + 0.5, (p / side) as f64 + 0.5, cx, cy, r))
            .collect();
        let frac = mask.iter().filter(|&&m| m).count() as f64 / total;
        if frac < MASK_COVERAGE.0 || frac > MASK_COVERAGE.1 {
            continue;
        }
        let fg = rng.random_range(0.65..0.95);
        let image = background(side, rng)
            .into_iter()
            .zip(&mask)
            .map(|(b, &m)| if m { fg } else { b }.clamp(0.0, 1.0))
            .collect();
        return Sample { image, label, mask };
    }
}

/// `n` class-balanced shape images, fully determined by `seed`.
pub fn generate_source(n: usize, seed: u64) -> Dataset {
    let classes = CLASS_NAMES.len();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng_from(&[seed, LABEL_TAG]));
    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| draw_sample(label, IMAGE_SIDE, &mut rng_from(&[seed, SAMPLE_TAG, i as u64])))
        .collect();
    Dataset {
        side: IMAGE_SIDE,
        samples,
    }
}

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::numerics::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    Blur,
    Contrast,
    Pixelate,
    ElasticLikeWarp,
    Brightness,
    FogLikeHaze,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::Blur,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
        CorruptionKind::ElasticLikeWarp,
        CorruptionKind::Brightness,
        CorruptionKind::FogLikeHaze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::ElasticLikeWarp => "elastic_like_warp",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::FogLikeHaze => "fog_like_haze",
        }
    }

    /// Severity-indexed parameter (index 0 is severity 1):
    ///
    /// | kind | parameter | 1 .. 5 |
    /// |---|---|---|
    /// | gaussian_noise | noise std | 0.04 0.08 0.12 0.16 0.20 |
    /// | shot_noise | photon count at full intensity | 60 25 12 6 3 |
    /// | blur | gaussian std in pixels | 0.5 0.75 1.0 1.5 2.0 |
    /// | contrast | contrast factor | 0.75 0.6 0.45 0.3 0.15 |
    /// | pixelate | coarse grid side | 12 10 8 6 4 |
    /// | elastic_like_warp | displacement amplitude in pixels | 0.5 1.0 1.5 2.0 2.5 |
    /// | brightness | additive offset | 0.1 0.2 0.3 0.4 0.5 |
    /// | fog_like_haze | haze blend weight | 0.2 0.3 0.4 0.5 0.6 |
    pub fn parameter(self, severity: u8) -> f64 {
        let table: [f64; 5] = match self {
            CorruptionKind::GaussianNoise => [0.04, 0.08, 0.12, 0.16, 0.20],
            CorruptionKind::ShotNoise => [60.0, 25.0, 12.0, 6.0, 3.0],
            CorruptionKind::Blur => [0.5, 0.75, 1.0, 1.5, 2.0],
            CorruptionKind::Contrast => [0.75, 0.6, 0.45, 0.3, 0.15],
            CorruptionKind::Pixelate => [12.0, 10.0, 8.0, 6.0, 4.0],
            CorruptionKind::ElasticLikeWarp => [0.5, 1.0, 1.5, 2.0, 2.5],
            CorruptionKind::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            CorruptionKind::FogLikeHaze => [0.2, 0.3, 0.4, 0.5, 0.6],
        };
        table[severity as usize - 1]
    }
}

impl std::fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown corruption kind `{s}`")))
    }
}

/// Bilinear resampling of a square image (pixel-centre alignment, edge clamp).
pub fn resize_bilinear(img: &[f64], side_in: usize, side_out: usize) -> Vec<f64> {
    let ratio = side_in as f64 / side_out as f64;
    let coord = |o: usize| {
        let s = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (side_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(side_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(side_out * side_out);
    for oy in 0..side_out {
        let (y0, y1, wy) = coord(oy);
        for ox in 0..side_out {
            let (x0, x1, wx) = coord(ox);
            let top = img[y0 * side_in + x0] * (1.0 - wx) + img[y0 * side_in + x1] * wx;
            let bot = img[y1 * side_in + x0] * (1.0 - wx) + img[y1 * side_in + x1] * wx;
            out.push(top * (1.0 - wy) + bot * wy);
        }
    }
    out
}

fn sample_bilinear(img: &[f64], side: usize, x: f64, y: f64) -> f64 {
    let max = (side - 1) as f64;
    let (x, y) = (x.clamp(0.0, max), y.clamp(0.0, max));
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(side - 1), (y0 + 1).min(side - 1));
    let (wx, wy) = (x - x0 as f64, y - y0 as f64);
    let top = img[y0 * side + x0] * (1.0 - wx) + img[y0 * side + x1] * wx;
    let bot = img[y1 * side + x0] * (1.0 - wx) + img[y1 * side + x1] * wx;
    top * (1.0 - wy) + bot * wy
}

fn gaussian_blur(img: &[f64], side: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; side * side];
        for y in 0..side {
            for x in 0..side {
                let mut acc = 0.0;
                for (ki, w) in kernel.iter().enumerate() {
                    let off = ki as isize - radius;
                    let (sx, sy) = if horizontal {
                        ((x as isize + off).clamp(0, side as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + off).clamp(0, side as isize - 1) as usize)
                    };
                    acc += w * src[sy * side + sx];
                }
                out[y * side + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

fn pixelate(img: &[f64], side: usize, coarse: usize) -> Vec<f64> {
    let cell = |i: usize| i * coarse / side;
    let mut sums = vec![0.0; coarse * coarse];
    let mut counts = vec![0usize; coarse * coarse];
    for y in 0..side {
        for x in 0..side {
            let c = cell(y) * coarse + cell(x);
            sums[c] += img[y * side + x];
            counts[c] += 1;
        }
    }
    (0..side * side)
        .map(|p| {
            let c = cell(p / side) * coarse + cell(p % side);
            sums[c] / counts[c] as f64
        })
        .collect()
}

fn smooth_field<R: Rng>(side: usize, rng: &mut R) -> impl Fn(usize, usize) -> f64 {
    let (a, b) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5));
    let ph = rng.random_range(0.0..TAU);
    move |x, y| (TAU * (a * x as f64 + b * y as f64) / side as f64 + ph).sin()
}

fn corrupt_image<R: Rng>(img: &[f64], side: usize, kind: CorruptionKind, p: f64, rng: &mut R) -> Vec<f64> {
    let out = match kind {
        CorruptionKind::GaussianNoise => {
            let noise = Normal::new(0.0, p).expect("positive std");
            img.iter().map(|&v| v + noise.sample(rng)).collect()
        }
        CorruptionKind::ShotNoise => img
            .iter()
            .map(|&v| {
                let rate = v.max(0.0) * p;
                if rate > 0.0 {
                    Poisson::new(rate).expect("positive rate").sample(rng) / p
                } else {
                    0.0
                }
            })
            .collect(),
        CorruptionKind::Blur => gaussian_blur(img, side, p),
        CorruptionKind::Contrast => {
            let mean = img.iter().sum::<f64>() / img.len() as f64;
            img.iter().map(|&v| (v - mean) * p + mean).collect()
        }
        CorruptionKind::Pixelate => pixelate(img, side, p as usize),
        CorruptionKind::ElasticLikeWarp => {
            let (fx, fy) = (smooth_field(side, rng), smooth_field(side, rng));
            (0..side * side)
                .map(|q| {
                    let (x, y) = (q % side, q / side);
                    sample_bilinear(img, side, x as f64 + p * fx(x, y), y as f64 + p * fy(x, y))
                })
                .collect()
        }
        CorruptionKind::Brightness => img.iter().map(|&v| v + p).collect(),
        CorruptionKind::FogLikeHaze => {
            let field = smooth_field(side, rng);
            (0..side * side)
                .map(|q| {
                    let haze = 0.75 + 0.2 * field(q % side, q / side);
                    img[q] * (1.0 - p) + haze * p
                })
                .collect()
        }
    };
    out.into_iter().map(|v: f64| v.clamp(0.0, 1.0)).collect()
}

/// Applies `kind` at `severity` to every image. Severity 0 is the identity;
/// labels and masks are never touched.
pub fn corrupt(data: &Dataset, kind: CorruptionKind, severity: u8, seed: u64) -> Result<Dataset> {
    if severity > 5 {
        return Err(Error::config(format!("severity must be in 0..=5, got {severity}")));
    }
    if severity == 0 {
        return Ok(data.clone());
    }
    let p = kind.parameter(severity);
    let samples = data
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = rng_from(&[seed, kind as u64, severity as u64, i as u64]);
            Sample {
                image: corrupt_image(&s.image, data.side, kind, p, &mut rng),
                label: s.label,
                mask: s.mask.clone(),
            }
        })
        .collect();
    Ok(Dataset {
        side: data.side,
        samples,
    })
}

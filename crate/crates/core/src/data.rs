//! Synthetic infrared scene generation: dim Gaussian targets stamped on a
//! low-frequency background with pixel noise. Fully deterministic in
//! (seed, index) so datasets are reproducible byte for byte.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BackgroundStyle {
    SmoothGradient,
    CloudClutter,
}

#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub targets_min: usize,
    pub targets_max: usize,
    /// Target radius in pixels; small targets are 1-4 px.
    pub radius_min: f32,
    pub radius_max: f32,
    /// Peak intensity added on top of the background.
    pub intensity_min: f32,
    pub intensity_max: f32,
    pub background: BackgroundStyle,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            targets_min: 1,
            targets_max: 3,
            radius_min: 1.0,
            radius_max: 4.0,
            intensity_min: 0.4,
            intensity_max: 0.8,
            background: BackgroundStyle::SmoothGradient,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

/// One synthetic scene: image in [0,1], binary mask, and the derived seed
/// it was generated from.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Vec<f32>,
    pub mask: Vec<f32>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataError {
    EmptyDataset,
    DegenerateSplit { train: usize, test: usize },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::EmptyDataset => write!(f, "dataset is empty"),
            DataError::DegenerateSplit { train, test } => {
                write!(f, "split produced train={train}, test={test}")
            }
        }
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Standard normal via Box-Muller.
fn normal(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen_range(0.0..1.0);
    libm::sqrtf(-2.0 * libm::logf(u1)) * libm::cosf(2.0 * core::f32::consts::PI * u2)
}

pub fn generate_scene(spec: &SceneSpec, index: u64) -> Sample {
    let seed = splitmix64(spec.seed ^ splitmix64(index.wrapping_add(1)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);
    let mut image = vec![0f32; h * w];
    let mut mask = vec![0f32; h * w];

    // background: a few large smooth bumps over a base level
    let (n_bumps, sigma_lo, sigma_hi) = match spec.background {
        BackgroundStyle::SmoothGradient => (3usize, h as f32 / 2.0, h as f32),
        BackgroundStyle::CloudClutter => (10, h as f32 / 8.0, h as f32 / 3.0),
    };
    let base: f32 = rng.gen_range(0.1..0.3);
    for v in image.iter_mut() {
        *v = base;
    }
    for _ in 0..n_bumps {
        let cy: f32 = rng.gen_range(0.0..h as f32);
        let cx: f32 = rng.gen_range(0.0..w as f32);
        let sigma: f32 = rng.gen_range(sigma_lo..sigma_hi);
        let amp: f32 = rng.gen_range(0.05..0.25);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f32 - cy) * (y as f32 - cy) + (x as f32 - cx) * (x as f32 - cx);
                image[y * w + x] += amp * libm::expf(-d2 / (2.0 * sigma * sigma));
            }
        }
    }

    // targets: non-overlapping Gaussian blobs, mask = support above half peak
    let n_targets = rng.gen_range(spec.targets_min..=spec.targets_max);
    let mut placed: Vec<(f32, f32, f32)> = Vec::new();
    for _ in 0..n_targets {
        let radius: f32 = rng.gen_range(spec.radius_min..=spec.radius_max);
        let peak: f32 = rng.gen_range(spec.intensity_min..=spec.intensity_max);
        let margin = radius + 2.0;
        let mut attempt = 0;
        let (cy, cx) = loop {
            let cy: f32 = rng.gen_range(margin..h as f32 - margin);
            let cx: f32 = rng.gen_range(margin..w as f32 - margin);
            let clear = placed.iter().all(|&(py, px, pr)| {
                let d2 = (py - cy) * (py - cy) + (px - cx) * (px - cx);
                d2 > (pr + radius + 2.0) * (pr + radius + 2.0)
            });
            if clear || attempt > 50 {
                break (cy, cx);
            }
            attempt += 1;
        };
        placed.push((cy, cx, radius));
        let sigma = radius / 2.0;
        let reach = (radius * 2.0 + 2.0) as isize;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (y, x) = (cy as isize + dy, cx as isize + dx);
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let fy = y as f32 - cy;
                let fx = x as f32 - cx;
                let val = peak * libm::expf(-(fy * fy + fx * fx) / (2.0 * sigma * sigma));
                let idx = y as usize * w + x as usize;
                image[idx] += val;
                if val > 0.5 * peak {
                    mask[idx] = 1.0;
                }
            }
        }
    }

    // pixel noise, then clamp to [0,1]
    for v in image.iter_mut() {
        *v += spec.noise_sigma * normal(&mut rng);
        *v = v.clamp(0.0, 1.0);
    }
    Sample { image, mask, seed }
}

pub fn generate_dataset(spec: &SceneSpec, count: usize) -> Vec<Sample> {
    (0..count as u64).map(|i| generate_scene(spec, i)).collect()
}

/// Deterministic seeded shuffle, then a disjoint, exhaustive split.
/// Train size rounds to the nearest integer and must leave both sides
/// nonempty.
pub fn split_dataset(
    n: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if n == 0 {
        return Err(DataError::EmptyDataset);
    }
    assert!(train_fraction > 0.0 && train_fraction < 1.0);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let train_count = libm::round(train_fraction * n as f64) as usize;
    if train_count == 0 || train_count >= n {
        return Err(DataError::DegenerateSplit { train: train_count, test: n - train_count });
    }
    let test = idx.split_off(train_count);
    Ok((idx, test))
}

//! Synthetic small-object task and its per-cell loss.
//!
//! Each image is a cluttered RGB background (smooth low-frequency shading,
//! bright elongated streaks and pixel noise) with 0–4 small bright blobs of
//! 2–4 px diameter. The target is a binary grid at the detector's output
//! stride: a cell is 1 iff some blob center falls inside it. Streaks share
//! the blobs' color and brightness, so telling them apart needs context
//! beyond a few pixels.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::ops::sigmoid;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Distractor content of the synthetic images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clutter {
    /// Streak count is uniform on `0..=max_streaks`.
    pub max_streaks: usize,
    /// Dotted-line count is uniform on `0..=max_chains`.
    pub max_chains: usize,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    /// Per-image object contrast is uniform on this range; every shape in
    /// an image gets that contrast within ±10 %.
    pub contrast: (f64, f64),
}

impl Default for Clutter {
    fn default() -> Self {
        Self {
            max_streaks: 6,
            max_chains: 0,
            noise: 0.03,
            contrast: (0.35, 0.6),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    /// Side of one target cell in pixels (the model's total stride).
    pub cell: usize,
    /// Blob count is uniform on `0..=max_blobs`.
    pub max_blobs: usize,
    pub clutter: Clutter,
}

impl SyntheticConfig {
    pub fn new(height: usize, width: usize, cell: usize) -> Self {
        Self {
            height,
            width,
            cell,
            max_blobs: 4,
            clutter: Clutter::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cell == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("synthetic: zero-sized image or cell"));
        }
        if !self.height.is_multiple_of(self.cell) || !self.width.is_multiple_of(self.cell) {
            return Err(Error::config(format!(
                "synthetic: {}x{} image not divisible by cell size {}",
                self.height, self.width, self.cell
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("synthetic: images must be at least 8x8"));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.cell, self.width / self.cell)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub cy: f64,
    pub cx: f64,
    pub diameter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `(1, 3, H, W)`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `(1, 1, H/cell, W/cell)` presence grid.
    pub target: Tensor<f32>,
    pub blobs: Vec<Blob>,
}

/// Sample `index` of the dataset keyed by `seed`; independent of every other index.
pub fn gen_sample(seed: u64, index: u64, cfg: &SyntheticConfig) -> Result<SyntheticSample> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(seed).fork(index);
    let (h, w) = (cfg.height, cfg.width);
    let mut img = alloc::vec![0.0f64; 3 * h * w];

    // Smooth shading: a random 4×4 control grid per channel, bilinearly
    // upsampled, plus one tilted gradient.
    let base = rng.uniform_range(0.2, 0.45);
    let tilt = (rng.uniform_range(-0.1, 0.1), rng.uniform_range(-0.1, 0.1));
    for c in 0..3 {
        let grid: Vec<f64> = (0..16).map(|_| rng.uniform_range(-0.12, 0.12)).collect();
        for y in 0..h {
            let gy = y as f64 / (h - 1) as f64 * 3.0;
            let (y0, fy) = ((gy.floor() as usize).min(2), gy - (gy.floor()).min(2.0));
            for x in 0..w {
                let gx = x as f64 / (w - 1) as f64 * 3.0;
                let (x0, fx) = ((gx.floor() as usize).min(2), gx - (gx.floor()).min(2.0));
                let g = |yy: usize, xx: usize| grid[yy * 4 + xx];
                let v = g(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + g(y0, x0 + 1) * (1.0 - fy) * fx
                    + g(y0 + 1, x0) * fy * (1.0 - fx)
                    + g(y0 + 1, x0 + 1) * fy * fx;
                let t = tilt.0 * (y as f64 / h as f64 - 0.5) + tilt.1 * (x as f64 / w as f64 - 0.5);
                img[(c * h + y) * w + x] = base + v + t;
            }
        }
    }

    let (lo, hi) = cfg.clutter.contrast;
    let contrast = rng.uniform_range(lo, hi);
    let color = |rng: &mut SplitMix64| {
        let k = contrast * rng.uniform_range(0.9, 1.1);
        [k, k * rng.uniform_range(0.85, 1.0), k * rng.uniform_range(0.8, 1.0)]
    };

    // Streaks: line segments as bright and as thick as the blobs.
    let streaks = rng.below(cfg.clutter.max_streaks as u64 + 1) as usize;
    for _ in 0..streaks {
        let (y0, x0) = (rng.uniform_range(0.0, h as f64), rng.uniform_range(0.0, w as f64));
        let angle = rng.uniform_range(0.0, core::f64::consts::PI);
        let len = rng.uniform_range(10.0, 22.0);
        let width = rng.uniform_range(2.0, 3.0);
        let col = color(&mut rng);
        let (dy, dx) = (angle.sin(), angle.cos());
        let (y1, x1) = (y0 + dy * len, x0 + dx * len);
        paint(&mut img, h, w, col, |y, x| {
            let t = (((y - y0) * dy + (x - x0) * dx) / len).clamp(0.0, 1.0);
            let (py, px) = (y0 + t * (y1 - y0), x0 + t * (x1 - x0));
            coverage(((y - py).powi(2) + (x - px).powi(2)).sqrt(), width / 2.0)
        });
    }

    // Dotted lines: evenly spaced dots that individually look like blobs.
    let chains = rng.below(cfg.clutter.max_chains as u64 + 1) as usize;
    for _ in 0..chains {
        let (y0, x0) = (rng.uniform_range(0.0, h as f64), rng.uniform_range(0.0, w as f64));
        let angle = rng.uniform_range(0.0, 2.0 * core::f64::consts::PI);
        let (dy, dx) = (angle.sin(), angle.cos());
        let spacing = rng.uniform_range(5.0, 8.0);
        let dots = 3 + rng.below(4) as usize;
        let radius = rng.uniform_range(2.0, 4.0) / 2.0;
        let col = color(&mut rng);
        for k in 0..dots {
            let (cy, cx) = (y0 + dy * spacing * k as f64, x0 + dx * spacing * k as f64);
            paint(&mut img, h, w, col, |y, x| {
                coverage(Float::sqrt((y - cy).powi(2) + (x - cx).powi(2)), radius)
            });
        }
    }

    let n_blobs = rng.below(cfg.max_blobs as u64 + 1) as usize;
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let blob = Blob {
            cy: rng.uniform_range(1.0, h as f64 - 1.0),
            cx: rng.uniform_range(1.0, w as f64 - 1.0),
            diameter: rng.uniform_range(2.0, 4.0),
        };
        let col = color(&mut rng);
        paint(&mut img, h, w, col, |y, x| {
            coverage(
                ((y - blob.cy).powi(2) + (x - blob.cx).powi(2)).sqrt(),
                blob.diameter / 2.0,
            )
        });
        blobs.push(blob);
    }

    for v in img.iter_mut() {
        *v = (*v + cfg.clutter.noise * rng.normal()).clamp(0.0, 1.0);
    }

    let (gh, gw) = cfg.grid();
    let mut target = Tensor::zeros(Shape::new(1, 1, gh, gw));
    for b in &blobs {
        let (cy, cx) = (b.cy as usize / cfg.cell, b.cx as usize / cfg.cell);
        target.set(0, 0, cy.min(gh - 1), cx.min(gw - 1), 1.0);
    }
    Ok(SyntheticSample {
        image: Tensor::from_vec(Shape::new(1, 3, h, w), img.into_iter().map(|v| v as f32).collect())?,
        target,
        blobs,
    })
}

/// Anti-aliased disk/line coverage: 1 inside `radius`, fading over one pixel.
fn coverage(dist: f64, radius: f64) -> f64 {
    (radius + 0.5 - dist).clamp(0.0, 1.0)
}

/// Adds `color · cover(y, x)` at pixel centers, keeping the maximum of
/// overlapping shapes instead of their sum.
fn paint(img: &mut [f64], h: usize, w: usize, color: [f64; 3], cover: impl Fn(f64, f64) -> f64) {
    for y in 0..h {
        for x in 0..w {
            let a = cover(y as f64 + 0.5, x as f64 + 0.5);
            if a <= 0.0 {
                continue;
            }
            for (c, &k) in color.iter().enumerate() {
                let v = &mut img[(c * h + y) * w + x];
                *v += a * k;
            }
        }
    }
}

pub fn gen_synthetic(seed: u64, count: usize, cfg: &SyntheticConfig) -> Result<Vec<SyntheticSample>> {
    (0..count as u64).map(|i| gen_sample(seed, i, cfg)).collect()
}

/// Stacks the images and targets of `indices` into `(B, …)` tensors.
pub fn batch<T: Scalar>(samples: &[SyntheticSample], indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples
        .get(*indices.first().ok_or(Error::config("empty batch"))?)
        .ok_or(Error::config("batch index out of range"))?;
    let (is, ts) = (first.image.shape(), first.target.shape());
    let n = indices.len();
    let mut images = Vec::with_capacity(n * is.numel());
    let mut targets = Vec::with_capacity(n * ts.numel());
    for &i in indices {
        let s = samples.get(i).ok_or(Error::config("batch index out of range"))?;
        images.extend(s.image.data().iter().map(|&v| T::from_f64(v as f64)));
        targets.extend(s.target.data().iter().map(|&v| T::from_f64(v as f64)));
    }
    Ok((
        Tensor::from_vec(Shape::new(n, is.channels, is.height, is.width), images)?,
        Tensor::from_vec(Shape::new(n, ts.channels, ts.height, ts.width), targets)?,
    ))
}

/// Mean binary cross-entropy on logits and its gradient.
///
/// Per element `max(z, 0) − z·y + ln(1 + e^{−|z|})`; gradient `(σ(z) − y)/N`.
pub fn bce_loss<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    target.expect_shape("bce_loss", logits.shape())?;
    logits.expect_nonempty("bce_loss")?;
    let n = T::from_usize(logits.numel());
    let zero = T::zero();
    let loss = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &y)| z.max(zero) - z * y + Float::ln_1p((-z.abs()).exp()))
        .sum::<T>()
        / n;
    let grad = sigmoid(logits).zip_map(target, "bce_loss", |p, y| (p - y) / n)?;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_index() {
        let cfg = SyntheticConfig::new(64, 64, 16);
        let a = gen_synthetic(3, 4, &cfg).unwrap();
        let b = gen_synthetic(3, 4, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(gen_sample(3, 2, &cfg).unwrap(), a[2]);
        assert_ne!(gen_sample(4, 2, &cfg).unwrap(), a[2]);
    }

    #[test]
    fn targets_mark_blob_cells_and_pixels_are_in_range() {
        let cfg = SyntheticConfig::new(64, 64, 16);
        for s in gen_synthetic(11, 50, &cfg).unwrap() {
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let mut expect = Tensor::<f32>::zeros(s.target.shape());
            for b in &s.blobs {
                assert!((2.0..=4.0).contains(&b.diameter));
                expect.set(0, 0, b.cy as usize / 16, b.cx as usize / 16, 1.0);
            }
            assert_eq!(s.target, expect);
            if s.blobs.is_empty() {
                assert!(s.target.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn incompatible_size_is_an_error() {
        assert!(gen_sample(0, 0, &SyntheticConfig::new(60, 64, 16)).is_err());
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let z = Tensor::<f64>::zeros(Shape::new(2, 1, 4, 4));
        let y = Tensor::from_fn(z.shape(), |i| (i % 2) as f64);
        let (l, g) = bce_loss(&z, &y).unwrap();
        assert!((l - core::f64::consts::LN_2).abs() < 1e-15);
        assert!((g.data()[0] - 0.5 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn bce_vanishes_for_confident_correct_logits() {
        let y = Tensor::<f64>::from_fn(Shape::new(1, 1, 2, 2), |i| (i % 2) as f64);
        let z = y.map(|v| if v > 0.5 { 40.0 } else { -40.0 });
        let (l, _) = bce_loss(&z, &y).unwrap();
        assert!(l < 1e-16);
        let z = y.map(|v| if v > 0.5 { 1000.0 } else { -1000.0 });
        assert!(bce_loss(&z, &y).unwrap().0.is_finite());
    }
}

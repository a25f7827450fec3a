//! Effective receptive field: how strongly each input pixel influences the
//! center output position.
//!
//! For random standard-normal inputs the summed center activation (over
//! output channels) is backpropagated to the input; absolute input
//! gradients, summed over input channels and averaged over samples, form the
//! map. The map is normalized to unit mass.

use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::ops::Mode;
use crate::rng::SplitMix64;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ErfMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, non-negative, sums to 1.
    pub map: Vec<f64>,
    /// Input pixel aligned with the center output position.
    pub center: (usize, usize),
}

impl ErfMap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.map[y * self.width + x]
    }

    /// Bounding box `(rows, cols)` of strictly nonzero entries.
    pub fn support(&self) -> (usize, usize) {
        let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.at(y, x) > 0.0 {
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                }
            }
        }
        if y0 == usize::MAX {
            (0, 0)
        } else {
            (y1 - y0 + 1, x1 - x0 + 1)
        }
    }

    /// Larger side of [`ErfMap::support`].
    pub fn support_width(&self) -> usize {
        let (h, w) = self.support();
        h.max(w)
    }

    /// Smallest Euclidean distance from the center within which at least
    /// `fraction` of the mass lies.
    pub fn mass_radius(&self, fraction: f64) -> f64 {
        let (cy, cx) = (self.center.0 as f64, self.center.1 as f64);
        let mut by_dist: Vec<(f64, f64)> = (0..self.height * self.width)
            .map(|i| {
                let (y, x) = ((i / self.width) as f64, (i % self.width) as f64);
                (Float::sqrt((y - cy).powi(2) + (x - cx).powi(2)), self.map[i])
            })
            .collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut acc = 0.0;
        for (d, m) in by_dist {
            acc += m;
            // tolerate rounding in the normalization
            if acc >= fraction - 1e-12 {
                return d;
            }
        }
        f64::INFINITY
    }

    pub fn radius95(&self) -> f64 {
        self.mass_radius(0.95)
    }
}

/// ERF of `module` (run in eval mode) for inputs of shape `input`.
///
/// The module must preserve spatial size up to a stride, so that the center
/// output position maps to the center input pixel.
pub fn erf_estimate<M: Module<f64> + ?Sized>(
    module: &mut M,
    input: Shape,
    samples: usize,
    seed: u64,
) -> Result<ErfMap> {
    if samples == 0 {
        return Err(Error::config("erf: at least one sample is required"));
    }
    if input.batch != 1 || input.is_empty() {
        return Err(Error::shape("erf", "input must be a single non-empty image"));
    }
    let mut rng = SplitMix64::new(seed);
    let (h, w) = (input.height, input.width);
    let mut acc = alloc::vec![0.0f64; h * w];
    let mut center = (h / 2, w / 2);
    for _ in 0..samples {
        let x = Tensor::from_fn(input, |_| rng.normal());
        let y = module.forward(&x, Mode::Eval)?;
        let os = y.shape();
        let (oy, ox) = (os.height / 2, os.width / 2);
        center = ((oy * h) / os.height.max(1), (ox * w) / os.width.max(1));
        let mut g = Tensor::zeros(os);
        for c in 0..os.channels {
            g.set(0, c, oy, ox, 1.0);
        }
        let gx = module.backward(&g)?;
        for c in 0..input.channels {
            for (a, v) in acc.iter_mut().zip(gx.plane(0, c)) {
                *a += v.abs();
            }
        }
    }
    module.zero_grad();
    let total: f64 = acc.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::shape("erf", "center output has no input gradient"));
    }
    for a in acc.iter_mut() {
        *a /= total;
    }
    Ok(ErfMap {
        height: h,
        width: w,
        map: acc,
        center,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{MksBlock, MksBlockConfig};
    use crate::nn::Conv2d;
    use crate::ops::ConvSpec;

    #[test]
    fn single_3x3_conv_has_exact_3x3_support() {
        let mut rng = SplitMix64::new(1);
        let mut conv = Conv2d::<f64>::new(ConvSpec::dense(4, 4, 3), true, &mut rng).unwrap();
        let m = erf_estimate(&mut conv, Shape::new(1, 4, 15, 15), 4, 2).unwrap();
        assert_eq!(m.support(), (3, 3));
        assert!((m.map.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(m.map.iter().all(|&v| v >= 0.0));
        assert!(m.radius95() <= 2f64.sqrt() + 1e-12);
    }

    #[test]
    fn spatial_only_block_spans_branch_and_attention_kernels() {
        let mut rng = SplitMix64::new(3);
        let mut cfg = MksBlockConfig::new(4, 2, 7, 2);
        cfg.channel_attention = false;
        let mut block = MksBlock::<f64>::new(cfg, &mut rng).unwrap();
        let m = erf_estimate(&mut block, Shape::new(1, 4, 33, 33), 2, 4).unwrap();
        // widest branch spans 13; the 7×7 attention conv adds 3 on each side
        assert_eq!(m.support(), (19, 19));
    }

    #[test]
    fn zero_samples_is_an_error() {
        let mut rng = SplitMix64::new(1);
        let mut conv = Conv2d::<f64>::new(ConvSpec::dense(1, 1, 3), false, &mut rng).unwrap();
        assert!(erf_estimate(&mut conv, Shape::new(1, 1, 5, 5), 0, 0).is_err());
    }
}

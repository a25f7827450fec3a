use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether batch norm uses batch statistics (and updates the running ones)
/// or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running mean/variance, each `(1, C, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(Shape::vector(1, channels)),
            var: Tensor::ones(Shape::vector(1, channels)),
        }
    }
}

/// What the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub mode: Mode,
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// `y = γ·(x − μ)/√(σ² + ε) + β` per channel.
///
/// Train mode normalizes with the biased batch variance over `(B, H, W)` and
/// moves the running statistics by `momentum` (running variance uses the
/// unbiased estimate). Eval mode reads the running statistics.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut RunningStats<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    x.expect_nonempty("batchnorm")?;
    let s = x.shape();
    let cshape = Shape::vector(1, s.channels);
    gamma.expect_shape("batchnorm gamma", cshape)?;
    beta.expect_shape("batchnorm beta", cshape)?;
    running.mean.expect_shape("batchnorm running mean", cshape)?;
    running.var.expect_shape("batchnorm running var", cshape)?;

    let eps = T::from_f64(BN_EPS);
    let momentum = T::from_f64(BN_MOMENTUM);
    let count = s.batch * s.plane();
    let n = T::from_usize(count);
    let mut x_hat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    let mut inv_std = Vec::with_capacity(s.channels);

    for c in 0..s.channels {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = T::zero();
                for b in 0..s.batch {
                    sum += x.plane(b, c).iter().copied().sum::<T>();
                }
                let mean = sum / n;
                let mut sq = T::zero();
                for b in 0..s.batch {
                    sq += x.plane(b, c).iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                }
                let var = sq / n;
                let unbiased = if count > 1 { sq / T::from_usize(count - 1) } else { var };
                let rm = &mut running.mean.data_mut()[c];
                *rm = (T::one() - momentum) * *rm + momentum * mean;
                let rv = &mut running.var.data_mut()[c];
                *rv = (T::one() - momentum) * *rv + momentum * unbiased;
                (mean, var)
            }
            Mode::Eval => (running.mean.data()[c], running.var.data()[c]),
        };
        let istd = T::one() / (var + eps).sqrt();
        inv_std.push(istd);
        let (g, bt) = (gamma.data()[c], beta.data()[c]);
        for b in 0..s.batch {
            let src = x.plane(b, c);
            let xh = x_hat.plane_mut(b, c);
            for (h, &v) in xh.iter_mut().zip(src) {
                *h = (v - mean) * istd;
            }
            let yy = y.plane_mut(b, c);
            for (o, &h) in yy.iter_mut().zip(x_hat.plane(b, c)) {
                *o = g * h + bt;
            }
        }
    }
    Ok((y, BatchNormCache { mode, x_hat, inv_std }))
}

pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let s = cache.x_hat.shape();
    grad_out.expect_shape("batchnorm backward", s)?;
    if cache.inv_std.len() != s.channels {
        return Err(Error::shape("batchnorm backward", "corrupt cache"));
    }
    let n = T::from_usize(s.batch * s.plane());
    let mut gx = Tensor::zeros(s);
    let mut gg = Tensor::zeros(Shape::vector(1, s.channels));
    let mut gb = Tensor::zeros(Shape::vector(1, s.channels));

    for c in 0..s.channels {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for b in 0..s.batch {
            for (&g, &h) in grad_out.plane(b, c).iter().zip(cache.x_hat.plane(b, c)) {
                sum_g += g;
                sum_gx += g * h;
            }
        }
        gg.data_mut()[c] = sum_gx;
        gb.data_mut()[c] = sum_g;
        let scale = gamma.data()[c] * cache.inv_std[c];
        for b in 0..s.batch {
            let go = grad_out.plane(b, c);
            let xh = cache.x_hat.plane(b, c);
            let gi = gx.plane_mut(b, c);
            match cache.mode {
                Mode::Train => {
                    for ((o, &g), &h) in gi.iter_mut().zip(go).zip(xh) {
                        *o = scale * (g - sum_g / n - h * sum_gx / n);
                    }
                }
                Mode::Eval => {
                    for (o, &g) in gi.iter_mut().zip(go) {
                        *o = scale * g;
                    }
                }
            }
        }
    }
    Ok(BatchNormGrads {
        input: gx,
        gamma: gg,
        beta: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn affine(c: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::ones(Shape::vector(1, c)), Tensor::zeros(Shape::vector(1, c)))
    }

    #[test]
    fn constant_channels_normalize_to_zero() {
        let x = Tensor::<f64>::from_fn(Shape::new(2, 3, 4, 4), |i| ((i / 16) % 3) as f64 * 7.0);
        let (g, b) = affine(3);
        let mut rs = RunningStats::new(3);
        let (y, _) = batchnorm_forward(&x, &g, &b, &mut rs, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut r = SplitMix64::new(9);
        let x = Tensor::<f64>::from_fn(Shape::new(4, 3, 8, 8), |_| 3.0 + 2.0 * r.normal());
        let (g, b) = affine(3);
        let mut rs = RunningStats::new(3);
        let (_, cache) = batchnorm_forward(&x, &g, &b, &mut rs, Mode::Train).unwrap();
        let n = 4.0 * 64.0;
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|bb| cache.x_hat.plane(bb, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
        // running stats moved 10% of the way toward the batch statistics
        assert!(rs.mean.data().iter().all(|&m| (m - 0.3).abs() < 0.05));
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = Tensor::<f64>::full(Shape::new(1, 2, 2, 2), 3.0);
        let (g, b) = affine(2);
        let mut rs = RunningStats::new(2);
        rs.mean.fill(1.0);
        rs.var.fill(4.0 - BN_EPS);
        let before = rs.clone();
        let (y, _) = batchnorm_forward(&x, &g, &b, &mut rs, Mode::Eval).unwrap();
        assert_eq!(rs, before);
        assert!(y.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 2));
        let (g, b) = affine(3);
        let mut rs = RunningStats::new(3);
        assert!(batchnorm_forward(&x, &g, &b, &mut rs, Mode::Train).is_err());
    }
}

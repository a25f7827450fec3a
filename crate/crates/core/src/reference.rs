//! Slow, literal reference implementations used to cross-check the
//! optimized code paths: a loop-nest convolution, AP by threshold
//! enumeration and a scalar AdamW.

use alloc::vec::Vec;

use num_traits::Float;

use crate::metrics::ScoredPrediction;
use crate::ops::ConvSpec;
use crate::optim::AdamWConfig;
use crate::tensor::{Shape, Tensor};

/// Direct convolution as a plain loop nest over batch, output channel,
/// output row, output column, input channel of the group and both kernel
/// axes. Out-of-range taps read zero.
pub fn conv2d(x: &Tensor<f64>, weight: &Tensor<f64>, bias: Option<&Tensor<f64>>, spec: &ConvSpec) -> Tensor<f64> {
    let xs = x.shape();
    let (kh, kw) = spec.kernel;
    let (s, d, p) = (spec.stride as isize, spec.dilation as isize, spec.padding as isize);
    let ho = (xs.height as isize + 2 * p - d * (kh as isize - 1) - 1) / s + 1;
    let wo = (xs.width as isize + 2 * p - d * (kw as isize - 1) - 1) / s + 1;
    let out_shape = Shape::new(xs.batch, spec.out_channels, ho as usize, wo as usize);
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let mut y = Tensor::zeros(out_shape);
    for b in 0..xs.batch {
        for oc in 0..spec.out_channels {
            let g = oc / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |t| t.data()[oc]);
                    for icg in 0..cin_g {
                        let ic = g * cin_g + icg;
                        for ky in 0..kh as isize {
                            for kx in 0..kw as isize {
                                let iy = oy * s - p + ky * d;
                                let ix = ox * s - p + kx * d;
                                if iy < 0 || ix < 0 || iy >= xs.height as isize || ix >= xs.width as isize {
                                    continue;
                                }
                                acc += x.at(b, ic, iy as usize, ix as usize)
                                    * weight.at(oc, icg, ky as usize, kx as usize);
                            }
                        }
                    }
                    y.set(b, oc, oy as usize, ox as usize, acc);
                }
            }
        }
    }
    y
}

/// AP as the area under the interpolated precision curve, built by
/// sweeping every distinct score as a detection threshold.
///
/// At threshold `t` all predictions scoring `≥ t` are detections, giving an
/// operating point `(recall, precision)`. The interpolated precision at a
/// point is the best precision of any point with equal or higher recall;
/// AP sums it over the recall increments.
pub fn average_precision(preds: &[ScoredPrediction], total_positives: usize) -> f64 {
    let mut thresholds: Vec<f64> = preds.iter().map(|p| p.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let detected = preds.iter().filter(|p| p.score >= t);
            let (n, tp) = detected.fold((0usize, 0usize), |(n, tp), p| (n + 1, tp + usize::from(p.is_positive)));
            (tp as f64 / total_positives as f64, tp as f64 / n as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        let best = points[i..].iter().map(|&(_, p)| p).fold(0.0, f64::max);
        ap += (r - prev_recall) * best;
        prev_recall = r;
    }
    ap
}

/// One scalar weight through `grads.len()` AdamW steps; `lrs[t]` is the
/// learning rate of step `t`. Returns the weight after every step.
pub fn adamw_scalar(w0: f64, grads: &[f64], lrs: &[f64], c: &AdamWConfig) -> Vec<f64> {
    let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
    let mut out = Vec::with_capacity(grads.len());
    for (t, (&g, &lr)) in grads.iter().zip(lrs).enumerate() {
        let step = (t + 1) as i32;
        w -= lr * c.weight_decay * w;
        m = c.beta1 * m + (1.0 - c.beta1) * g;
        v = c.beta2 * v + (1.0 - c.beta2) * g * g;
        let m_hat = m / (1.0 - Float::powi(c.beta1, step));
        let v_hat = v / (1.0 - Float::powi(c.beta2, step));
        w -= lr * m_hat / (Float::sqrt(v_hat) + c.eps);
        out.push(w);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel() {
        let x = Tensor::from_fn(Shape::new(1, 1, 3, 3), |i| i as f64);
        let mut w = Tensor::zeros(Shape::new(1, 1, 3, 3));
        w.set(0, 0, 1, 1, 1.0);
        assert_eq!(conv2d(&x, &w, None, &ConvSpec::dense(1, 1, 3)), x);
    }

    #[test]
    fn threshold_ap_of_the_hand_example() {
        let p = [
            ScoredPrediction::new(0.9, true),
            ScoredPrediction::new(0.8, false),
            ScoredPrediction::new(0.7, true),
        ];
        assert!((average_precision(&p, 2) - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step() {
        let c = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let w = adamw_scalar(1.0, &[3.0], &[0.1], &c);
        assert!((w[0] - (1.0 - 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
    }
}

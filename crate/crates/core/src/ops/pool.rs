use alloc::vec::Vec;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Mean over `H×W` per `(b, c)`; result `(B, C, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_nonempty("global_avg_pool")?;
    let s = x.shape();
    let n = T::from_usize(s.plane());
    Ok(Tensor::from_fn(Shape::vector(s.batch, s.channels), |i| {
        let (b, c) = (i / s.channels, i % s.channels);
        x.plane(b, c).iter().copied().sum::<T>() / n
    }))
}

pub fn global_avg_pool_backward<T: Scalar>(grad_out: &Tensor<T>, input_shape: Shape) -> Result<Tensor<T>> {
    grad_out.expect_shape(
        "global_avg_pool backward",
        Shape::vector(input_shape.batch, input_shape.channels),
    )?;
    let n = T::from_usize(input_shape.plane());
    let mut gx = Tensor::zeros(input_shape);
    for (i, &g) in grad_out.data().iter().enumerate() {
        let (b, c) = (i / input_shape.channels, i % input_shape.channels);
        gx.plane_mut(b, c).iter_mut().for_each(|v| *v = g / n);
    }
    Ok(gx)
}

/// First index of the maximum (lowest linear index wins ties).
fn argmax<T: Scalar>(values: impl Iterator<Item = T>) -> (usize, T) {
    let mut best = (0, T::neg_infinity());
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Max over `H×W` per `(b, c)`; also returns the in-plane argmax for backward.
pub fn global_max_pool<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    x.expect_nonempty("global_max_pool")?;
    let s = x.shape();
    let mut idx = Vec::with_capacity(s.batch * s.channels);
    let mut out = Tensor::zeros(Shape::vector(s.batch, s.channels));
    for b in 0..s.batch {
        for c in 0..s.channels {
            let (i, v) = argmax(x.plane(b, c).iter().copied());
            idx.push(i);
            out.data_mut()[b * s.channels + c] = v;
        }
    }
    Ok((out, idx))
}

/// Routes each gradient to the recorded argmax position only.
pub fn global_max_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: Shape,
) -> Result<Tensor<T>> {
    grad_out.expect_shape(
        "global_max_pool backward",
        Shape::vector(input_shape.batch, input_shape.channels),
    )?;
    let mut gx = Tensor::zeros(input_shape);
    for (i, (&g, &pos)) in grad_out.data().iter().zip(argmax).enumerate() {
        let (b, c) = (i / input_shape.channels, i % input_shape.channels);
        gx.plane_mut(b, c)[pos] = g;
    }
    Ok(gx)
}

/// Per-pixel mean across channels; result `(B, 1, H, W)`.
pub fn channel_mean<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_nonempty("channel_mean")?;
    let s = x.shape();
    let n = T::from_usize(s.channels);
    let mut out = Tensor::zeros(s.with_channels(1));
    for b in 0..s.batch {
        let o = out.plane_mut(b, 0);
        for c in 0..s.channels {
            for (ov, &v) in o.iter_mut().zip(x.plane(b, c)) {
                *ov += v;
            }
        }
        o.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

pub fn channel_mean_backward<T: Scalar>(grad_out: &Tensor<T>, input_shape: Shape) -> Result<Tensor<T>> {
    grad_out.expect_shape("channel_mean backward", input_shape.with_channels(1))?;
    let n = T::from_usize(input_shape.channels);
    let mut gx = Tensor::zeros(input_shape);
    for b in 0..input_shape.batch {
        let g = grad_out.plane(b, 0);
        for c in 0..input_shape.channels {
            for (gv, &v) in gx.plane_mut(b, c).iter_mut().zip(g) {
                *gv = v / n;
            }
        }
    }
    Ok(gx)
}

/// Per-pixel max across channels; also returns the winning channel per pixel.
pub fn channel_max<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    x.expect_nonempty("channel_max")?;
    let s = x.shape();
    let plane = s.plane();
    let mut out = Tensor::full(s.with_channels(1), T::neg_infinity());
    let mut idx = alloc::vec![0usize; s.batch * plane];
    for b in 0..s.batch {
        let o = out.plane_mut(b, 0);
        let ix = &mut idx[b * plane..(b + 1) * plane];
        for c in 0..s.channels {
            for ((ov, iv), &v) in o.iter_mut().zip(ix.iter_mut()).zip(x.plane(b, c)) {
                if v > *ov {
                    *ov = v;
                    *iv = c;
                }
            }
        }
    }
    Ok((out, idx))
}

pub fn channel_max_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: Shape,
) -> Result<Tensor<T>> {
    grad_out.expect_shape("channel_max backward", input_shape.with_channels(1))?;
    let plane = input_shape.plane();
    let mut gx = Tensor::zeros(input_shape);
    for b in 0..input_shape.batch {
        for (p, &g) in grad_out.plane(b, 0).iter().enumerate() {
            let c = argmax[b * plane + p];
            gx.plane_mut(b, c)[p] = g;
        }
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_arithmetic() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), alloc::vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let (m, idx) = global_max_pool(&x).unwrap();
        assert_eq!(m.data(), &[4.0]);
        assert_eq!(idx, [3]);
    }

    #[test]
    fn constant_input() {
        let x = Tensor::<f64>::full(Shape::new(2, 3, 4, 5), 1.25);
        assert!(global_avg_pool(&x).unwrap().data().iter().all(|&v| v == 1.25));
        assert!(global_max_pool(&x).unwrap().0.data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn ties_route_to_first_index() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 4), alloc::vec![0.0, 5.0, 5.0, 1.0]).unwrap();
        let (_, idx) = global_max_pool(&x).unwrap();
        let g = Tensor::<f64>::ones(Shape::vector(1, 1));
        let gx = global_max_pool_backward(&g, &idx, x.shape()).unwrap();
        assert_eq!(gx.data(), &[0.0, 1.0, 0.0, 0.0]);

        let x = Tensor::<f64>::from_vec(Shape::new(1, 2, 1, 1), alloc::vec![2.0, 2.0]).unwrap();
        let (_, idx) = channel_max(&x).unwrap();
        assert_eq!(idx, [0]);
    }

    #[test]
    fn channel_stats() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 2, 1, 1), alloc::vec![1.0, 3.0]).unwrap();
        assert_eq!(channel_mean(&x).unwrap().data(), &[2.0]);
        assert_eq!(channel_max(&x).unwrap().0.data(), &[3.0]);

        let single = Tensor::<f64>::from_fn(Shape::new(2, 1, 3, 3), |i| i as f64 * 0.5 - 2.0);
        assert_eq!(channel_mean(&single).unwrap(), single);
        assert_eq!(channel_max(&single).unwrap().0, single);
    }
}

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Result extent of broadcasting `a` against `b`: per axis the sizes must be
/// equal or one of them must be 1.
pub fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let (da, db) = (a.dims(), b.dims());
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (da[i], db[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    "broadcast",
                    format!("{a} and {b} are not broadcast-compatible"),
                ))
            }
        };
    }
    Ok(Shape::from_dims(out))
}

/// Row-major strides of `s` with zero stride on singleton axes broadcast to `out`.
fn broadcast_strides(s: Shape, out: Shape) -> [usize; 4] {
    let d = s.dims();
    let o = out.dims();
    let full = [d[1] * d[2] * d[3], d[2] * d[3], d[3], 1];
    let mut st = [0; 4];
    for i in 0..4 {
        st[i] = if d[i] == 1 && o[i] != 1 { 0 } else { full[i] };
    }
    st
}

fn for_each_broadcast(a: Shape, b: Shape, out: Shape, mut f: impl FnMut(usize, usize, usize)) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let mut o = 0;
    for n in 0..out.batch {
        for c in 0..out.channels {
            let (ia_c, ib_c) = (n * sa[0] + c * sa[1], n * sb[0] + c * sb[1]);
            for h in 0..out.height {
                let (ia_h, ib_h) = (ia_c + h * sa[2], ib_c + h * sb[2]);
                for w in 0..out.width {
                    f(o, ia_h + w * sa[3], ib_h + w * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

/// Elementwise product with broadcasting along singleton axes of either operand.
pub fn mul_broadcast<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let mut out = Tensor::zeros(out_shape);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for_each_broadcast(a.shape(), b.shape(), out_shape, |o, i, j| od[o] = ad[i] * bd[j]);
    Ok(out)
}

/// Returns `(grad_a, grad_b)`, each summed back down to its operand's extent.
pub fn mul_broadcast_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    grad_out.expect_shape("mul_broadcast backward", out_shape)?;
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    let (ad, bd, gd) = (a.data(), b.data(), grad_out.data());
    {
        let (gad, gbd) = (ga.data_mut(), gb.data_mut());
        for_each_broadcast(a.shape(), b.shape(), out_shape, |o, i, j| {
            gad[i] += gd[o] * bd[j];
            gbd[j] += gd[o] * ad[i];
        });
    }
    Ok((ga, gb))
}

/// Sums `x` over the axes where `target` is 1 (the adjoint of broadcasting).
pub fn reduce_to_shape<T: Scalar>(x: &Tensor<T>, target: Shape) -> Result<Tensor<T>> {
    if broadcast_shape(x.shape(), target)? != x.shape() {
        return Err(Error::shape(
            "reduce_to_shape",
            format!("{} does not broadcast to {}", target, x.shape()),
        ));
    }
    let mut out = Tensor::zeros(target);
    let xd = x.data();
    let od = out.data_mut();
    for_each_broadcast(x.shape(), target, x.shape(), |o, _, j| od[j] += xd[o]);
    Ok(out)
}

/// Concatenates along the channel axis in argument order.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?
        .shape();
    let mut channels = 0;
    for p in parts {
        let s = p.shape();
        if s.batch != first.batch || s.height != first.height || s.width != first.width {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                expected: first.with_channels(s.channels),
                got: s,
            });
        }
        channels += s.channels;
    }
    let out_shape = first.with_channels(channels);
    let plane = first.plane();
    let mut data = Vec::with_capacity(out_shape.numel());
    for b in 0..first.batch {
        for p in parts {
            let c = p.shape().channels;
            data.extend_from_slice(&p.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Channels `[start, start + len)`.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if len == 0 || start + len > s.channels {
        return Err(Error::shape(
            "slice_channels",
            format!("range {start}..{} outside {} channels", start + len, s.channels),
        ));
    }
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.batch * len * plane);
    for b in 0..s.batch {
        let base = (b * s.channels + start) * plane;
        data.extend_from_slice(&x.data()[base..base + len * plane]);
    }
    Tensor::from_vec(s.with_channels(len), data)
}

/// Inverse of [`concat_channels`]: splits into consecutive blocks of the given sizes.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let total: usize = sizes.iter().sum();
    if total != x.shape().channels {
        return Err(Error::shape(
            "split_channels",
            format!("block sizes sum to {total}, tensor has {} channels", x.shape().channels),
        ));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let t = slice_channels(x, start, len);
            start += len;
            t
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut r = SplitMix64::new(seed);
        Tensor::from_fn(shape, |_| r.uniform_range(-1.0, 1.0))
    }

    #[test]
    fn multiply_by_ones_gate_is_identity() {
        let x = random(Shape::new(2, 3, 4, 4), 1);
        let y = mul_broadcast(&x, &Tensor::ones(Shape::new(2, 3, 1, 1))).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn spatial_map_broadcasts_over_channels() {
        let x = random(Shape::new(1, 3, 2, 2), 2);
        let m = random(Shape::new(1, 1, 2, 2), 3);
        let y = mul_broadcast(&x, &m).unwrap();
        for c in 0..3 {
            for h in 0..2 {
                for w in 0..2 {
                    assert_eq!(y.at(0, c, h, w), x.at(0, c, h, w) * m.at(0, 0, h, w));
                }
            }
        }
        let g = random(y.shape(), 4);
        let (ga, gb) = mul_broadcast_backward(&g, &x, &m).unwrap();
        assert_eq!(ga.shape(), x.shape());
        let expect: f64 = (0..3).map(|c| g.at(0, c, 1, 0) * x.at(0, c, 1, 0)).sum();
        assert!((gb.at(0, 0, 1, 0) - expect).abs() < 1e-15);
    }

    #[test]
    fn incompatible_broadcast_is_an_error() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 3, 2, 2));
        let b = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 2));
        assert!(mul_broadcast(&a, &b).is_err());
    }

    #[test]
    fn concat_preserves_block_order() {
        let parts: Vec<_> = (0..4).map(|i| random(Shape::new(2, 16, 3, 3), 10 + i)).collect();
        let refs: Vec<_> = parts.iter().collect();
        let t = concat_channels(&refs).unwrap();
        assert_eq!(t.shape(), Shape::new(2, 64, 3, 3));
        assert_eq!(t.at(1, 16 * 2 + 5, 2, 1), parts[2].at(1, 5, 2, 1));
        let back = split_channels(&t, &[16; 4]).unwrap();
        assert_eq!(back, parts);
    }

    #[test]
    fn reduce_is_adjoint_of_broadcast() {
        let x = random(Shape::new(2, 3, 2, 2), 5);
        let r = reduce_to_shape(&x, Shape::new(1, 3, 1, 1)).unwrap();
        let expect: f64 = (0..2)
            .flat_map(|b| (0..4).map(move |i| (b, i)))
            .map(|(b, i)| x.plane(b, 1)[i])
            .sum();
        assert!((r.data()[1] - expect).abs() < 1e-14);
    }
}

use alloc::format;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// `y[b, o] = Σ_i W[o, i]·x[b, i] + bias[o]` on `(B, C_in, 1, 1)` inputs.
///
/// `weight` is `(C_out, C_in, 1, 1)`, `bias` is `(1, C_out, 1, 1)`.
pub fn fully_connected<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (batch, c_in, c_out) = check(x, weight)?;
    if let Some(b) = bias {
        b.expect_shape("fully_connected bias", Shape::vector(1, c_out))?;
    }
    let mut out = Tensor::zeros(Shape::vector(batch, c_out));
    let (xd, wd) = (x.data(), weight.data());
    for b in 0..batch {
        let xrow = &xd[b * c_in..(b + 1) * c_in];
        for o in 0..c_out {
            let wrow = &wd[o * c_in..(o + 1) * c_in];
            let acc: T = wrow.iter().zip(xrow).map(|(&w, &v)| w * v).sum();
            out.data_mut()[b * c_out + o] = acc + bias.map_or(T::zero(), |t| t.data()[o]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn fully_connected_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (batch, c_in, c_out) = check(x, weight)?;
    grad_out.expect_shape("fully_connected backward", Shape::vector(batch, c_out))?;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(Shape::vector(1, c_out));
    let (xd, wd, gd) = (x.data(), weight.data(), grad_out.data());
    for b in 0..batch {
        for o in 0..c_out {
            let g = gd[b * c_out + o];
            gb.data_mut()[o] += g;
            let wrow = &wd[o * c_in..(o + 1) * c_in];
            let gxrow = &mut gx.data_mut()[b * c_in..(b + 1) * c_in];
            for (gxi, &w) in gxrow.iter_mut().zip(wrow) {
                *gxi += g * w;
            }
            let gwrow = &mut gw.data_mut()[o * c_in..(o + 1) * c_in];
            for (gwi, &v) in gwrow.iter_mut().zip(&xd[b * c_in..(b + 1) * c_in]) {
                *gwi += g * v;
            }
        }
    }
    Ok(LinearGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

fn check<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let xs = x.shape();
    let ws = weight.shape();
    x.expect_nonempty("fully_connected")?;
    if xs.height != 1 || xs.width != 1 {
        return Err(Error::shape(
            "fully_connected",
            format!("expects (B, C, 1, 1) input, got {xs}"),
        ));
    }
    if ws.channels != xs.channels || ws.height != 1 || ws.width != 1 {
        return Err(Error::ShapeMismatch {
            op: "fully_connected weight",
            expected: Shape::new(ws.batch, xs.channels, 1, 1),
            got: ws,
        });
    }
    Ok((xs.batch, xs.channels, ws.batch))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_affine_map() {
        let x = Tensor::<f64>::from_vec(Shape::vector(2, 2), alloc::vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let w = Tensor::from_vec(Shape::new(3, 2, 1, 1), alloc::vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::from_vec(Shape::vector(1, 3), alloc::vec![0.0, 1.0, -1.0]).unwrap();
        let y = fully_connected(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0, 2.0, -1.0, 1.5, -1.5]);
    }

    #[test]
    fn rejects_spatial_input() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 1));
        let w = Tensor::zeros(Shape::new(3, 2, 1, 1));
        assert!(fully_connected(&x, &w, None).is_err());
    }
}

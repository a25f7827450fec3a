use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pointwise nonlinearity used inside the attention branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn forward<T: Scalar>(self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Relu => relu(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x.clone(),
        }
    }

    /// `input` and `output` are the forward's argument and result.
    pub fn backward<T: Scalar>(self, grad_out: &Tensor<T>, input: &Tensor<T>, output: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Activation::Relu => relu_backward(grad_out, input),
            Activation::Sigmoid => sigmoid_backward(grad_out, output),
            Activation::Identity => {
                grad_out.expect_shape("identity backward", input.shape())?;
                Ok(grad_out.clone())
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // Split on sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Uses the forward output `y`: `dy/dx = y(1−y)`.
pub fn sigmoid_backward<T: Scalar>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.zip_map(output, "sigmoid backward", |g, y| g * y * (T::one() - y))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.zip_map(input, "relu backward", |g, x| if x > T::zero() { g } else { T::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn sigmoid_values_and_range() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 5), alloc::vec![0.0, 30.0, -30.0, 700.0, -700.0]).unwrap();
        let y = sigmoid(&x);
        assert_eq!(y.data()[0], 0.5);
        assert!(y.data()[1] < 1.0 && y.data()[2] > 0.0);
        assert!(y.data().iter().all(|v| v.is_finite()));
        let x32 = Tensor::<f32>::from_vec(Shape::new(1, 1, 1, 2), alloc::vec![8.0, -8.0]).unwrap();
        let y32 = sigmoid(&x32);
        assert!(y32.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn relu_is_nonnegative() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 2, 3, 3), |i| i as f64 - 9.0);
        assert!(relu(&x).data().iter().all(|&v| v >= 0.0));
    }
}

//! Stateful layers: parameters, forward caches and gradient accumulation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec, Mode, RunningStats};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Learnable,
    /// Batch-norm running statistic; serialized but never trained.
    Buffer,
}

/// A named tensor with a same-shape gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub kind: ParamKind,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self {
            grad: Tensor::zeros(value.shape()),
            value,
            kind: ParamKind::Learnable,
        }
    }

    pub fn buffer(value: Tensor<T>) -> Self {
        Self {
            kind: ParamKind::Buffer,
            ..Self::new(value)
        }
    }

    pub fn is_learnable(&self) -> bool {
        self.kind == ParamKind::Learnable
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn accumulate(&mut self, g: &Tensor<T>) -> Result<()> {
        self.grad.add_assign(g)
    }

    /// Replaces the value, keeping the gradient shape in sync.
    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        value.expect_shape("param", self.value.shape())?;
        self.value = value;
        Ok(())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

pub type ParamRefs<'a, T> = Vec<(String, &'a Param<T>)>;
pub type ParamRefsMut<'a, T> = Vec<(String, &'a mut Param<T>)>;

/// A differentiable building block with an explicit backward pass.
///
/// `forward` caches whatever `backward` needs; `backward` accumulates into the
/// parameter gradients and returns the gradient with respect to the input.
pub trait Module<T: Scalar> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;

    /// Parameters and buffers, named relative to `prefix`.
    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>);

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>);

    /// Multiply-accumulates executed by convolutions and fully connected
    /// layers since construction (or the last [`Module::reset_macs`]).
    fn macs(&self) -> u64;

    fn reset_macs(&mut self);

    fn params(&self) -> ParamRefs<'_, T> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn params_mut(&mut self) -> ParamRefsMut<'_, T> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Total element count of learnable parameters.
    fn num_params(&self) -> usize {
        self.params()
            .iter()
            .filter(|(_, p)| p.is_learnable())
            .map(|(_, p)| p.value.numel())
            .sum()
    }
}

/// Uniform `±√(3/fan_in)` (unit-variance preserving for linear maps).
pub fn fan_in_uniform<T: Scalar>(shape: Shape, fan_in: usize, rng: &mut SplitMix64) -> Tensor<T> {
    let bound = Float::sqrt(3.0 / fan_in as f64);
    Tensor::from_fn(shape, |_| T::from_f64(rng.uniform_range(-bound, bound)))
}

fn take_cache<'a, C>(cache: &'a Option<C>, name: &'static str) -> Result<&'a C> {
    cache.as_ref().ok_or(Error::NoCache(name))
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub spec: ConvSpec,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    input: Option<Tensor<T>>,
    macs: u64,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(spec: ConvSpec, bias: bool, rng: &mut SplitMix64) -> Result<Self> {
        spec.validate()?;
        let ws = spec.weight_shape();
        let fan_in = ws.channels * ws.height * ws.width;
        Ok(Self {
            spec,
            weight: Param::new(fan_in_uniform(ws, fan_in, rng)),
            bias: bias.then(|| Param::new(Tensor::zeros(Shape::vector(1, spec.out_channels)))),
            input: None,
            macs: 0,
        })
    }

    /// Forward without caching; usable through a shared reference.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d_forward(x, &self.weight.value, self.bias.as_ref().map(|b| &b.value), &self.spec)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.macs += self.spec.macs(x.shape())?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take_cache(&self.input, "conv2d")?;
        let g = ops::conv2d_backward(grad_out, x, &self.weight.value, &self.spec, self.bias.is_some())?;
        self.weight.accumulate(&g.weight)?;
        if let (Some(b), Some(gb)) = (self.bias.as_mut(), g.bias.as_ref()) {
            b.accumulate(gb)?;
        }
        Ok(g.input)
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn macs(&self) -> u64 {
        self.macs
    }

    fn reset_macs(&mut self) {
        self.macs = 0;
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    cache: Option<ops::BatchNormCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        let rs = RunningStats::<T>::new(channels);
        Self {
            gamma: Param::new(Tensor::ones(Shape::vector(1, channels))),
            beta: Param::new(Tensor::zeros(Shape::vector(1, channels))),
            running_mean: Param::buffer(rs.mean),
            running_var: Param::buffer(rs.var),
            cache: None,
        }
    }

    fn stats(&self) -> RunningStats<T> {
        RunningStats {
            mean: self.running_mean.value.clone(),
            var: self.running_var.value.clone(),
        }
    }

    /// Eval-mode forward without caching.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut rs = self.stats();
        let (y, _) = ops::batchnorm_forward(x, &self.gamma.value, &self.beta.value, &mut rs, Mode::Eval)?;
        Ok(y)
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut rs = self.stats();
        let (y, cache) = ops::batchnorm_forward(x, &self.gamma.value, &self.beta.value, &mut rs, mode)?;
        self.running_mean.value = rs.mean;
        self.running_var.value = rs.var;
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = take_cache(&self.cache, "batchnorm")?;
        let g = ops::batchnorm_backward(grad_out, cache, &self.gamma.value)?;
        self.gamma.accumulate(&g.gamma)?;
        self.beta.accumulate(&g.beta)?;
        Ok(g.input)
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        out.push((join(prefix, "weight"), &self.gamma));
        out.push((join(prefix, "bias"), &self.beta));
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        out.push((join(prefix, "weight"), &mut self.gamma));
        out.push((join(prefix, "bias"), &mut self.beta));
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }

    fn macs(&self) -> u64 {
        0
    }

    fn reset_macs(&mut self) {}
}

/// Fully connected layer on `(B, C, 1, 1)` feature vectors.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
    macs: u64,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut SplitMix64) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(Error::config("linear layer with zero features"));
        }
        Ok(Self {
            weight: Param::new(fan_in_uniform(
                Shape::new(out_features, in_features, 1, 1),
                in_features,
                rng,
            )),
            bias: Param::new(Tensor::zeros(Shape::vector(1, out_features))),
            input: None,
            macs: 0,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape().channels
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape().batch
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::fully_connected(x, &self.weight.value, Some(&self.bias.value))
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.macs += (x.shape().batch * self.in_features() * self.out_features()) as u64;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take_cache(&self.input, "linear")?;
        let g = ops::fully_connected_backward(grad_out, x, &self.weight.value)?;
        self.weight.accumulate(&g.weight)?;
        self.bias.accumulate(&g.bias)?;
        Ok(g.input)
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }

    fn macs(&self) -> u64 {
        self.macs
    }

    fn reset_macs(&mut self) {
        self.macs = 0;
    }
}

/// Learnable per-channel multiplier `(1, C, 1, 1)`, initialized to 1.
#[derive(Debug, Clone)]
pub struct ChannelScale<T> {
    pub scale: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> ChannelScale<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Param::new(Tensor::ones(Shape::vector(1, channels))),
            input: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::mul_broadcast(x, &self.scale.value)
    }
}

impl<T: Scalar> Module<T> for ChannelScale<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take_cache(&self.input, "channel scale")?;
        let (gx, gs) = ops::mul_broadcast_backward(grad_out, x, &self.scale.value)?;
        self.scale.accumulate(&gs)?;
        Ok(gx)
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        out.push((String::from(prefix), &self.scale));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        out.push((String::from(prefix), &mut self.scale));
    }

    fn macs(&self) -> u64 {
        0
    }

    fn reset_macs(&mut self) {}
}

/// Stateless activation that remembers its input and output for backward.
#[derive(Debug, Clone, Default)]
pub struct ActivationLayer<T> {
    pub kind: ops::Activation,
    io: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> ActivationLayer<T> {
    pub fn new(kind: ops::Activation) -> Self {
        Self { kind, io: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.kind.forward(x);
        self.io = Some((x.clone(), y.clone()));
        y
    }

    pub fn backward(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (x, y) = take_cache(&self.io, "activation")?;
        self.kind.backward(grad_out, x, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_layer_names_and_counts() {
        let mut rng = SplitMix64::new(0);
        let conv = Conv2d::<f32>::new(ConvSpec::dense(3, 8, 3), true, &mut rng).unwrap();
        let names: Vec<_> = conv.params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["weight", "bias"]);
        assert_eq!(conv.num_params(), 3 * 8 * 9 + 8);
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let mut rng = SplitMix64::new(0);
        let mut lin = Linear::<f64>::new(2, 2, &mut rng).unwrap();
        let g = Tensor::zeros(Shape::vector(1, 2));
        assert!(matches!(lin.backward(&g), Err(Error::NoCache(_))));
    }

    #[test]
    fn batchnorm_buffers_are_not_learnable() {
        let bn = BatchNorm2d::<f32>::new(4);
        assert_eq!(bn.num_params(), 8);
        assert_eq!(bn.params().len(), 4);
    }

    #[test]
    fn init_is_bounded_by_fan_in() {
        let mut rng = SplitMix64::new(5);
        let w: Tensor<f64> = fan_in_uniform(Shape::new(4, 3, 3, 3), 27, &mut rng);
        let bound = (3.0f64 / 27.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }
}

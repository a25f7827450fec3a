//! Central finite-difference gradient checking in double precision.
//!
//! A unit under test maps its tensors to one output `y`. The scalar probed is
//! `L = Σ y ⊙ R` for a fixed random projection `R`, so the analytic gradient
//! is the backward pass seeded with `R`, and every checked element `θ` gets
//! the numeric estimate `(L(θ+ε) − L(θ−ε)) / 2ε`.
//!
//! The error for one element is `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::nn::{Module, Param, ParamRefsMut};
use crate::ops::Mode;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tolerance: 1e-6,
            floor: 1e-3,
            seed: 0x5eed,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tolerance(self, tolerance: f64) -> Self {
        Self { tolerance, ..self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Tensor and flat index of the worst element.
    pub worst: (String, usize),
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Something with a forward, a backward and a set of tensors to perturb.
pub trait Checkable {
    fn forward(&mut self) -> Result<Tensor<f64>>;

    /// Must accumulate into the `grad` of every tensor returned by [`Checkable::tensors`].
    fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<()>;

    fn tensors(&mut self) -> ParamRefsMut<'_, f64>;
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn gradcheck(name: &str, unit: &mut dyn Checkable, cfg: &GradCheckConfig) -> Result<GradReport> {
    let y = unit.forward()?;
    let mut rng = SplitMix64::new(cfg.seed);
    let proj = Tensor::from_fn(y.shape(), |_| rng.uniform_range(-1.0, 1.0));

    for (_, p) in unit.tensors() {
        p.zero_grad();
    }
    unit.backward(&proj)?;
    let analytic: Vec<(String, Vec<f64>)> = unit
        .tensors()
        .into_iter()
        .filter(|(_, p)| p.is_learnable())
        .map(|(n, p)| (n, p.grad.data().to_vec()))
        .collect();

    let mut report = GradReport {
        name: String::from(name),
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        checked: 0,
        tolerance: cfg.tolerance,
        passed: true,
    };
    for (tname, grads) in &analytic {
        for (i, &a) in grads.iter().enumerate() {
            let orig = perturb(unit, tname, i, None)?;
            perturb(unit, tname, i, Some(orig + cfg.eps))?;
            let lp = unit.forward()?.dot(&proj)?;
            perturb(unit, tname, i, Some(orig - cfg.eps))?;
            let lm = unit.forward()?.dot(&proj)?;
            perturb(unit, tname, i, Some(orig))?;
            let numeric = (lp - lm) / (2.0 * cfg.eps);
            let err = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = err;
                report.worst = (tname.clone(), i);
            }
        }
    }
    report.passed = report.max_rel_error < cfg.tolerance;
    Ok(report)
}

/// Reads element `i` of tensor `name`, optionally overwriting it.
fn perturb(unit: &mut dyn Checkable, name: &str, i: usize, value: Option<f64>) -> Result<f64> {
    let mut tensors = unit.tensors();
    let (_, p) = tensors
        .iter_mut()
        .find(|(n, _)| n == name)
        .ok_or(crate::Error::NoCache("gradcheck tensor"))?;
    let old = p.value.data()[i];
    if let Some(v) = value {
        p.value.data_mut()[i] = v;
    }
    Ok(old)
}

/// Checks a [`Module`] with respect to its input and all learnable parameters.
pub struct ModuleCheck<M> {
    pub module: M,
    pub input: Param<f64>,
    pub mode: Mode,
}

impl<M: Module<f64>> ModuleCheck<M> {
    pub fn new(module: M, input: Tensor<f64>, mode: Mode) -> Self {
        Self {
            module,
            input: Param::new(input),
            mode,
        }
    }
}

impl<M: Module<f64>> Checkable for ModuleCheck<M> {
    fn forward(&mut self) -> Result<Tensor<f64>> {
        self.module.forward(&self.input.value, self.mode)
    }

    fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<()> {
        let gx = self.module.backward(grad_out)?;
        self.input.accumulate(&gx)
    }

    fn tensors(&mut self) -> ParamRefsMut<'_, f64> {
        let mut out = Vec::new();
        out.push((String::from("input"), &mut self.input));
        self.module.collect_mut("", &mut out);
        out
    }
}

type ForwardFn = dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>;
type BackwardFn = dyn Fn(&[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>>;

/// Checks a pure function of several tensors given its hand-written backward.
pub struct FnCheck<'f> {
    names: Vec<String>,
    inputs: Vec<Param<f64>>,
    forward: &'f ForwardFn,
    backward: &'f BackwardFn,
}

impl<'f> FnCheck<'f> {
    pub fn new(inputs: Vec<(&str, Tensor<f64>)>, forward: &'f ForwardFn, backward: &'f BackwardFn) -> Self {
        let (names, inputs) = inputs
            .into_iter()
            .map(|(n, t)| (String::from(n), Param::new(t)))
            .unzip();
        Self {
            names,
            inputs,
            forward,
            backward,
        }
    }

    fn values(&self) -> Vec<Tensor<f64>> {
        self.inputs.iter().map(|p| p.value.clone()).collect()
    }
}

impl Checkable for FnCheck<'_> {
    fn forward(&mut self) -> Result<Tensor<f64>> {
        (self.forward)(&self.values())
    }

    fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<()> {
        let grads = (self.backward)(&self.values(), grad_out)?;
        for (p, g) in self.inputs.iter_mut().zip(&grads) {
            p.accumulate(g)?;
        }
        Ok(())
    }

    fn tensors(&mut self) -> ParamRefsMut<'_, f64> {
        self.names.iter().cloned().zip(self.inputs.iter_mut()).collect()
    }
}

/// Wraps a unit and scales its analytic gradients by `1 + fault`; a correct
/// checker must reject it.
pub struct Faulty<C> {
    pub inner: C,
    pub fault: f64,
}

impl<C: Checkable> Checkable for Faulty<C> {
    fn forward(&mut self) -> Result<Tensor<f64>> {
        self.inner.forward()
    }

    fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<()> {
        self.inner.backward(&grad_out.scale(1.0 + self.fault))
    }

    fn tensors(&mut self) -> ParamRefsMut<'_, f64> {
        self.inner.tensors()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use alloc::vec;

    fn doubling_forward(xs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(xs[0].scale(2.0))
    }

    fn doubling_backward(_: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![g.scale(2.0)])
    }

    #[test]
    fn linear_map_is_exact() {
        let x = Tensor::from_fn(Shape::new(1, 2, 3, 3), |i| i as f64 * 0.1);
        let mut unit = FnCheck::new(vec![("x", x)], &doubling_forward, &doubling_backward);
        let r = gradcheck("double", &mut unit, &GradCheckConfig::default()).unwrap();
        assert!(r.passed);
        assert_eq!(r.checked, 18);
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn wrong_backward_is_rejected() {
        let x = Tensor::from_fn(Shape::new(1, 1, 2, 2), |i| i as f64);
        let unit = FnCheck::new(vec![("x", x)], &doubling_forward, &doubling_backward);
        let mut faulty = Faulty {
            inner: unit,
            fault: 0.01,
        };
        let r = gradcheck("double", &mut faulty, &GradCheckConfig::default()).unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_error - 0.01 / 1.01).abs() < 1e-6);
    }
}

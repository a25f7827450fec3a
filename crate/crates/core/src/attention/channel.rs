use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{join, ActivationLayer, Linear, Module, ParamRefs, ParamRefsMut};
use crate::ops::{self, Activation, Mode};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelAttentionConfig {
    pub channels: usize,
    pub reduction: usize,
    pub activation: Activation,
}

impl ChannelAttentionConfig {
    pub fn new(channels: usize, reduction: usize) -> Self {
        Self {
            channels,
            reduction,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.reduction == 0 || !self.channels.is_multiple_of(self.reduction) {
            return Err(Error::config(format!(
                "channel attention: {} channels not divisible by reduction {}",
                self.channels, self.reduction
            )));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }
}

/// `C → C/r → C` with the activation after both layers.
#[derive(Debug, Clone)]
pub struct Bottleneck<T> {
    pub reduce: Linear<T>,
    pub act_reduce: ActivationLayer<T>,
    pub expand: Linear<T>,
    pub act_expand: ActivationLayer<T>,
}

impl<T: Scalar> Bottleneck<T> {
    fn new(cfg: &ChannelAttentionConfig, rng: &mut SplitMix64) -> Result<Self> {
        Ok(Self {
            reduce: Linear::new(cfg.channels, cfg.hidden(), rng)?,
            act_reduce: ActivationLayer::new(cfg.activation),
            expand: Linear::new(cfg.hidden(), cfg.channels, rng)?,
            act_expand: ActivationLayer::new(cfg.activation),
        })
    }

    fn forward(&mut self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.act_reduce.forward(&self.reduce.forward(v, Mode::Train)?);
        Ok(self.act_expand.forward(&self.expand.forward(&h, Mode::Train)?))
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.expand.backward(&self.act_expand.backward(g)?)?;
        self.reduce.backward(&self.act_reduce.backward(&g)?)
    }

    fn infer(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.act_reduce.kind.forward(&self.reduce.infer(v)?);
        Ok(self.act_expand.kind.forward(&self.expand.infer(&h)?))
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        self.reduce.collect(&join(prefix, "reduce"), out);
        self.expand.collect(&join(prefix, "expand"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        self.reduce.collect_mut(&join(prefix, "reduce"), out);
        self.expand.collect_mut(&join(prefix, "expand"), out);
    }
}

#[derive(Debug, Clone, Default)]
struct Cache<T> {
    x: Option<Tensor<T>>,
    max_idx: Vec<usize>,
    gate: Option<Tensor<T>>,
}

/// Per-channel gating from pooled statistics.
///
/// `A = avgpool(x)`, `M = maxpool(x)`, `Ã = mlp_avg(A)`, `M̃ = mlp_max(M)`,
/// `Õ = fc3((Ã + M̃)/2)` and the output is `x ⊙ sigmoid(Õ)` with the gate
/// broadcast over `H×W`.
#[derive(Debug, Clone)]
pub struct ChannelAttention<T> {
    config: ChannelAttentionConfig,
    pub avg_mlp: Bottleneck<T>,
    pub max_mlp: Bottleneck<T>,
    pub fuse: Linear<T>,
    cache: Cache<T>,
}

impl<T: Scalar> ChannelAttention<T> {
    pub fn new(config: ChannelAttentionConfig, rng: &mut SplitMix64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            avg_mlp: Bottleneck::new(&config, rng)?,
            max_mlp: Bottleneck::new(&config, rng)?,
            fuse: Linear::new(config.channels, config.channels, rng)?,
            cache: Cache::default(),
        })
    }

    pub fn config(&self) -> &ChannelAttentionConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().channels != self.config.channels {
            return Err(Error::shape(
                "channel attention",
                format!(
                    "input has {} channels, module built for {}",
                    x.shape().channels,
                    self.config.channels
                ),
            ));
        }
        Ok(())
    }

    /// The `(B, C, 1, 1)` gate `sigmoid(Õ)` of the last forward.
    pub fn last_gate(&self) -> Option<&Tensor<T>> {
        self.cache.gate.as_ref()
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let a = self.avg_mlp.infer(&ops::global_avg_pool(x)?)?;
        let m = self.max_mlp.infer(&ops::global_max_pool(x)?.0)?;
        let half = T::from_f64(0.5);
        let mixed = a.zip_map(&m, "channel attention", |p, q| (p + q) * half)?;
        let gate = ops::sigmoid(&self.fuse.infer(&mixed)?);
        ops::mul_broadcast(x, &gate)
    }
}

impl<T: Scalar> Module<T> for ChannelAttention<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let a = self.avg_mlp.forward(&ops::global_avg_pool(x)?)?;
        let (m, idx) = ops::global_max_pool(x)?;
        let m = self.max_mlp.forward(&m)?;
        let half = T::from_f64(0.5);
        let mixed = a.zip_map(&m, "channel attention", |p, q| (p + q) * half)?;
        let gate = ops::sigmoid(&self.fuse.forward(&mixed, Mode::Train)?);
        let out = ops::mul_broadcast(x, &gate)?;
        self.cache = Cache {
            x: Some(x.clone()),
            max_idx: idx,
            gate: Some(gate),
        };
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.x.as_ref().ok_or(Error::NoCache("channel attention"))?;
        let gate = self.cache.gate.as_ref().ok_or(Error::NoCache("channel attention"))?;
        let xs: Shape = x.shape();
        let (mut gx, g_gate) = ops::mul_broadcast_backward(grad_out, x, gate)?;
        let g_mixed = self.fuse.backward(&ops::sigmoid_backward(&g_gate, gate)?)?;
        let g_half = g_mixed.scale(T::from_f64(0.5));
        let ga = self.avg_mlp.backward(&g_half)?;
        let gm = self.max_mlp.backward(&g_half)?;
        gx.add_assign(&ops::global_avg_pool_backward(&ga, xs)?)?;
        gx.add_assign(&ops::global_max_pool_backward(&gm, &self.cache.max_idx, xs)?)?;
        Ok(gx)
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        self.avg_mlp.collect(&join(prefix, "avg_mlp"), out);
        self.max_mlp.collect(&join(prefix, "max_mlp"), out);
        self.fuse.collect(&join(prefix, "fuse"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        self.avg_mlp.collect_mut(&join(prefix, "avg_mlp"), out);
        self.max_mlp.collect_mut(&join(prefix, "max_mlp"), out);
        self.fuse.collect_mut(&join(prefix, "fuse"), out);
    }

    fn macs(&self) -> u64 {
        [
            &self.avg_mlp.reduce,
            &self.avg_mlp.expand,
            &self.max_mlp.reduce,
            &self.max_mlp.expand,
            &self.fuse,
        ]
        .iter()
        .map(|l| l.macs())
        .sum()
    }

    fn reset_macs(&mut self) {
        for l in [
            &mut self.avg_mlp.reduce,
            &mut self.avg_mlp.expand,
            &mut self.max_mlp.reduce,
            &mut self.max_mlp.expand,
            &mut self.fuse,
        ] {
            l.reset_macs();
        }
    }
}

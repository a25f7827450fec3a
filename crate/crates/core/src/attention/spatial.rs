use alloc::format;
use alloc::vec::Vec;

use super::schedule::KernelSchedule;
use crate::error::{Error, Result};
use crate::nn::{join, ActivationLayer, BatchNorm2d, Conv2d, Module, ParamRefs, ParamRefsMut};
use crate::ops::{self, Activation, ConvSpec, Mode};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Gradients of the fusion step: `(grad_x, grad_T_i, grad_Sig)`.
pub type FuseGrads<T> = (Tensor<T>, Vec<Tensor<T>>, Tensor<T>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatialAttentionConfig {
    pub channels: usize,
    pub branches: usize,
    pub max_size: usize,
    /// Kernel of the 2→S selection convolution (padding `k/2`).
    pub attention_kernel: usize,
    pub activation: Activation,
}

impl SpatialAttentionConfig {
    pub fn new(channels: usize, branches: usize, max_size: usize) -> Self {
        Self {
            channels,
            branches,
            max_size,
            attention_kernel: 7,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<KernelSchedule> {
        let schedule = KernelSchedule::new(self.branches, self.max_size)?;
        if self.channels == 0 || !self.channels.is_multiple_of(self.branches) {
            return Err(Error::config(format!(
                "spatial attention: {} channels not divisible by {} branches",
                self.channels, self.branches
            )));
        }
        if self.attention_kernel.is_multiple_of(2) {
            return Err(Error::config("spatial attention: selection kernel must be odd"));
        }
        Ok(schedule)
    }

    /// Channels of each transformed branch (`C/S`).
    pub fn branch_width(&self) -> usize {
        self.channels / self.branches
    }
}

/// One scale: depthwise dilated conv → BN → pointwise C→C → activation,
/// then the C→C/S transform.
#[derive(Debug, Clone)]
pub struct Branch<T> {
    pub spatial: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub pointwise: Conv2d<T>,
    pub act: ActivationLayer<T>,
    pub transform: Conv2d<T>,
}

#[derive(Debug, Clone, Default)]
struct Cache<T> {
    x: Option<Tensor<T>>,
    t_list: Vec<Tensor<T>>,
    t_shape: Option<Shape>,
    max_idx: Vec<usize>,
    sig: Option<Tensor<T>>,
    sig_slices: Vec<Tensor<T>>,
    q: Option<Tensor<T>>,
}

/// Multi-scale spatial attention.
///
/// For input `x (B, C, H, W)` each branch produces `X̃_i (B, C, H, W)` and a
/// projection `T_i (B, C/S, H, W)`. The channel-wise mean and max of
/// `T = concat(T_i)` feed a conv + sigmoid giving one selection map per branch
/// `Sig (B, S, H, W)`. The output is `x ⊙ conv1x1(Σ_i T_i ⊙ Sig_i)`.
#[derive(Debug, Clone)]
pub struct SpatialAttention<T> {
    config: SpatialAttentionConfig,
    schedule: KernelSchedule,
    pub branches: Vec<Branch<T>>,
    pub attn_conv: Conv2d<T>,
    pub out_conv: Conv2d<T>,
    cache: Cache<T>,
}

impl<T: Scalar> SpatialAttention<T> {
    pub fn new(config: SpatialAttentionConfig, rng: &mut SplitMix64) -> Result<Self> {
        let schedule = config.validate()?;
        let c = config.channels;
        let cb = config.branch_width();
        let branches = schedule
            .entries()
            .iter()
            .map(|k| {
                Ok(Branch {
                    spatial: Conv2d::new(k.depthwise(c), false, rng)?,
                    bn: BatchNorm2d::new(c),
                    pointwise: Conv2d::new(ConvSpec::pointwise(c, c), true, rng)?,
                    act: ActivationLayer::new(config.activation),
                    transform: Conv2d::new(ConvSpec::pointwise(c, cb), true, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let attn = ConvSpec::dense(2, config.branches, config.attention_kernel);
        Ok(Self {
            config,
            schedule,
            branches,
            attn_conv: Conv2d::new(attn, true, rng)?,
            out_conv: Conv2d::new(ConvSpec::pointwise(cb, c), true, rng)?,
            cache: Cache::default(),
        })
    }

    pub fn config(&self) -> &SpatialAttentionConfig {
        &self.config
    }

    pub fn schedule(&self) -> &KernelSchedule {
        &self.schedule
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().channels != self.config.channels {
            return Err(Error::shape(
                "spatial attention",
                format!(
                    "input has {} channels, module built for {}",
                    x.shape().channels,
                    self.config.channels
                ),
            ));
        }
        Ok(())
    }

    /// Per-branch features `X̃_i = σ(pointwise(BN(spatial_i(x))))`.
    pub fn extract(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Vec<Tensor<T>>> {
        self.check_input(x)?;
        self.branches
            .iter_mut()
            .map(|b| {
                let h = b.spatial.forward(x, mode)?;
                let h = b.bn.forward(&h, mode)?;
                let h = b.pointwise.forward(&h, mode)?;
                Ok(b.act.forward(&h))
            })
            .collect()
    }

    /// Gradient with respect to `x` given gradients of every `X̃_i`.
    pub fn extract_backward(&mut self, grads: &[Tensor<T>]) -> Result<Tensor<T>> {
        self.check_branch_count("extract backward", grads.len())?;
        let mut gx: Option<Tensor<T>> = None;
        for (b, g) in self.branches.iter_mut().zip(grads) {
            let g = b.act.backward(g)?;
            let g = b.pointwise.backward(&g)?;
            let g = b.bn.backward(&g)?;
            let g = b.spatial.backward(&g)?;
            match gx.as_mut() {
                Some(acc) => acc.add_assign(&g)?,
                None => gx = Some(g),
            }
        }
        gx.ok_or(Error::NoCache("spatial attention"))
    }

    /// Projects each `X̃_i` to `C/S` channels; returns the parts and their concatenation.
    pub fn transform(&mut self, features: &[Tensor<T>]) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        self.check_branch_count("transform", features.len())?;
        let parts = self
            .branches
            .iter_mut()
            .zip(features)
            .map(|(b, f)| b.transform.forward(f, Mode::Train))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        let t = ops::concat_channels(&refs)?;
        Ok((parts, t))
    }

    /// Gradients of every `X̃_i` given the total gradient of each `T_i`.
    pub fn transform_backward(&mut self, grads: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        self.check_branch_count("transform backward", grads.len())?;
        self.branches
            .iter_mut()
            .zip(grads)
            .map(|(b, g)| b.transform.backward(g))
            .collect()
    }

    /// Selection maps `Sig = sigmoid(conv(concat(mean_c(T), max_c(T))))`, `(B, S, H, W)`.
    pub fn attention(&mut self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let mean = ops::channel_mean(t)?;
        let (max, idx) = ops::channel_max(t)?;
        let m = ops::concat_channels(&[&mean, &max])?;
        let sig = ops::sigmoid(&self.attn_conv.forward(&m, Mode::Train)?);
        self.cache.t_shape = Some(t.shape());
        self.cache.max_idx = idx;
        self.cache.sig = Some(sig.clone());
        Ok(sig)
    }

    /// Gradient with respect to `T` given the gradient of `Sig`.
    pub fn attention_backward(&mut self, grad_sig: &Tensor<T>) -> Result<Tensor<T>> {
        let sig = self.cache.sig.as_ref().ok_or(Error::NoCache("spatial attention"))?;
        let t_shape = self.cache.t_shape.ok_or(Error::NoCache("spatial attention"))?;
        let gz = ops::sigmoid_backward(grad_sig, sig)?;
        let gm = self.attn_conv.backward(&gz)?;
        let halves = ops::split_channels(&gm, &[1, 1])?;
        let mut gt = ops::channel_mean_backward(&halves[0], t_shape)?;
        gt.add_assign(&ops::channel_max_backward(&halves[1], &self.cache.max_idx, t_shape)?)?;
        Ok(gt)
    }

    /// `O = x ⊙ out_conv(Σ_i T_i ⊙ Sig_i)`; `Sig_i` broadcasts over the `C/S` channels of `T_i`.
    pub fn fuse(&mut self, x: &Tensor<T>, t_list: &[Tensor<T>], sig: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.check_branch_count("fuse", t_list.len())?;
        if sig.shape().channels != t_list.len() {
            return Err(Error::shape(
                "fuse",
                format!("{} selection maps for {} branches", sig.shape().channels, t_list.len()),
            ));
        }
        let slices = ops::split_channels(sig, &alloc::vec![1; t_list.len()])?;
        let mut p: Option<Tensor<T>> = None;
        for (t, s) in t_list.iter().zip(&slices) {
            let term = ops::mul_broadcast(t, s)?;
            match p.as_mut() {
                Some(acc) => acc.add_assign(&term)?,
                None => p = Some(term),
            }
        }
        let p = p.ok_or(Error::shape("fuse", "no branches"))?;
        let q = self.out_conv.forward(&p, Mode::Train)?;
        let o = ops::mul_broadcast(x, &q)?;
        o.expect_shape("fuse output", x.shape())?;
        self.cache.x = Some(x.clone());
        self.cache.t_list = t_list.to_vec();
        self.cache.sig_slices = slices;
        self.cache.q = Some(q);
        Ok(o)
    }

    /// Returns `(grad_x, grad_T_i, grad_Sig)`.
    pub fn fuse_backward(&mut self, grad_out: &Tensor<T>) -> Result<FuseGrads<T>> {
        let x = self.cache.x.as_ref().ok_or(Error::NoCache("fuse"))?;
        let q = self.cache.q.as_ref().ok_or(Error::NoCache("fuse"))?;
        let (gx, gq) = ops::mul_broadcast_backward(grad_out, x, q)?;
        let gp = self.out_conv.backward(&gq)?;
        let mut gt = Vec::with_capacity(self.cache.t_list.len());
        let mut gs = Vec::with_capacity(self.cache.t_list.len());
        for (t, s) in self.cache.t_list.iter().zip(&self.cache.sig_slices) {
            let (g_t, g_s) = ops::mul_broadcast_backward(&gp, t, s)?;
            gt.push(g_t);
            gs.push(g_s);
        }
        let refs: Vec<&Tensor<T>> = gs.iter().collect();
        Ok((gx, gt, ops::concat_channels(&refs)?))
    }

    fn check_branch_count(&self, op: &'static str, n: usize) -> Result<()> {
        if n != self.branches.len() {
            return Err(Error::shape(
                op,
                format!("{n} tensors for {} branches", self.branches.len()),
            ));
        }
        Ok(())
    }

    /// Read-only forward in eval mode; no caches touched.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut parts = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let h = b.bn.infer(&b.spatial.infer(x)?)?;
            let h = b.act.kind.forward(&b.pointwise.infer(&h)?);
            parts.push(b.transform.infer(&h)?);
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        let t = ops::concat_channels(&refs)?;
        let m = ops::concat_channels(&[&ops::channel_mean(&t)?, &ops::channel_max(&t)?.0])?;
        let sig = ops::sigmoid(&self.attn_conv.infer(&m)?);
        let mut p = Tensor::zeros(parts[0].shape());
        for (i, part) in parts.iter().enumerate() {
            p.add_assign(&ops::mul_broadcast(part, &ops::slice_channels(&sig, i, 1)?)?)?;
        }
        ops::mul_broadcast(x, &self.out_conv.infer(&p)?)
    }
}

impl<T: Scalar> Module<T> for SpatialAttention<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let features = self.extract(x, mode)?;
        let (parts, t) = self.transform(&features)?;
        let sig = self.attention(&t)?;
        self.fuse(x, &parts, &sig)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (mut gx, mut gparts, gsig) = self.fuse_backward(grad_out)?;
        let gt = self.attention_backward(&gsig)?;
        let width = self.config.branch_width();
        let blocks = ops::split_channels(&gt, &alloc::vec![width; self.branches.len()])?;
        for (g, extra) in gparts.iter_mut().zip(&blocks) {
            g.add_assign(extra)?;
        }
        let gfeat = self.transform_backward(&gparts)?;
        gx.add_assign(&self.extract_backward(&gfeat)?)?;
        Ok(gx)
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        for (i, b) in self.branches.iter().enumerate() {
            let p = join(prefix, &format!("branch{i}"));
            b.spatial.collect(&join(&p, "spatial"), out);
            b.bn.collect(&join(&p, "bn"), out);
            b.pointwise.collect(&join(&p, "pointwise"), out);
            b.transform.collect(&join(&p, "transform"), out);
        }
        self.attn_conv.collect(&join(prefix, "attn_conv"), out);
        self.out_conv.collect(&join(prefix, "out_conv"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            let p = join(prefix, &format!("branch{i}"));
            b.spatial.collect_mut(&join(&p, "spatial"), out);
            b.bn.collect_mut(&join(&p, "bn"), out);
            b.pointwise.collect_mut(&join(&p, "pointwise"), out);
            b.transform.collect_mut(&join(&p, "transform"), out);
        }
        self.attn_conv.collect_mut(&join(prefix, "attn_conv"), out);
        self.out_conv.collect_mut(&join(prefix, "out_conv"), out);
    }

    fn macs(&self) -> u64 {
        self.branches
            .iter()
            .map(|b| b.spatial.macs() + b.pointwise.macs() + b.transform.macs())
            .sum::<u64>()
            + self.attn_conv.macs()
            + self.out_conv.macs()
    }

    fn reset_macs(&mut self) {
        for b in &mut self.branches {
            b.spatial.reset_macs();
            b.pointwise.reset_macs();
            b.transform.reset_macs();
        }
        self.attn_conv.reset_macs();
        self.out_conv.reset_macs();
    }
}

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::config::{BackboneConfig, StageConfig, Variant};
use crate::attention::MksBlock;
use crate::error::{Error, Result};
use crate::nn::{join, ActivationLayer, BatchNorm2d, ChannelScale, Conv2d, Module, Param, ParamRefs, ParamRefsMut};
use crate::ops::{Activation, ConvSpec, Mode};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Strided convolution + BN turning the image into a grid of patch features.
#[derive(Debug, Clone)]
pub struct PatchEmbed<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Scalar> PatchEmbed<T> {
    pub fn new(config: &BackboneConfig, rng: &mut SplitMix64) -> Result<Self> {
        let pe = config.patch_embed;
        let spec = ConvSpec::dense(config.in_channels, pe.channels, pe.kernel)
            .with_stride(pe.stride)
            .with_padding(0);
        Ok(Self {
            conv: Conv2d::new(spec, false, rng)?,
            bn: BatchNorm2d::new(pe.channels),
        })
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.conv.spec.stride;
        let (h, w) = (x.shape().height, x.shape().width);
        if h % s != 0 || w % s != 0 {
            return Err(Error::shape(
                "patch_embed",
                format!("input {h}x{w} not divisible by patch stride {s}"),
            ));
        }
        Ok(())
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        self.bn.infer(&self.conv.infer(x)?)
    }
}

impl<T: Scalar> Module<T> for PatchEmbed<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check(x)?;
        let h = self.conv.forward(x, mode)?;
        self.bn.forward(&h, mode)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.bn.backward(grad_out)?;
        self.conv.backward(&g)
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        self.conv.collect(&join(prefix, "conv"), out);
        self.bn.collect(&join(prefix, "bn"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        self.conv.collect_mut(&join(prefix, "conv"), out);
        self.bn.collect_mut(&join(prefix, "bn"), out);
    }

    fn macs(&self) -> u64 {
        self.conv.macs()
    }

    fn reset_macs(&mut self) {
        self.conv.reset_macs();
    }
}

/// Stride-2 3×3 convolution + BN between stages.
#[derive(Debug, Clone)]
pub struct Downsample<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Scalar> Downsample<T> {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut SplitMix64) -> Result<Self> {
        let spec = ConvSpec::dense(in_channels, out_channels, 3).with_stride(2);
        Ok(Self {
            conv: Conv2d::new(spec, false, rng)?,
            bn: BatchNorm2d::new(out_channels),
        })
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.bn.infer(&self.conv.infer(x)?)
    }
}

impl<T: Scalar> Module<T> for Downsample<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.conv.forward(x, mode)?;
        self.bn.forward(&h, mode)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.bn.backward(grad_out)?;
        self.conv.backward(&g)
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        self.conv.collect(&join(prefix, "conv"), out);
        self.bn.collect(&join(prefix, "bn"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        self.conv.collect_mut(&join(prefix, "conv"), out);
        self.bn.collect_mut(&join(prefix, "bn"), out);
    }

    fn macs(&self) -> u64 {
        self.conv.macs()
    }

    fn reset_macs(&mut self) {
        self.conv.reset_macs();
    }
}

/// Plain residual block: `x + λ ⊙ pw(relu(dw3x3(BN(x))))`.
#[derive(Debug, Clone)]
pub struct BaseBlock<T> {
    pub bn: BatchNorm2d<T>,
    pub dw: Conv2d<T>,
    pub act: ActivationLayer<T>,
    pub pw: Conv2d<T>,
    pub scale: ChannelScale<T>,
}

impl<T: Scalar> BaseBlock<T> {
    pub fn new(channels: usize, rng: &mut SplitMix64) -> Result<Self> {
        Ok(Self {
            bn: BatchNorm2d::new(channels),
            dw: Conv2d::new(ConvSpec::depthwise(channels, 3, 1, 1), true, rng)?,
            act: ActivationLayer::new(Activation::Relu),
            pw: Conv2d::new(ConvSpec::pointwise(channels, channels), true, rng)?,
            scale: ChannelScale::new(channels),
        })
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.dw.infer(&self.bn.infer(x)?)?;
        let h = self.pw.infer(&self.act.kind.forward(&h))?;
        x.add(&self.scale.infer(&h)?)
    }
}

impl<T: Scalar> Module<T> for BaseBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.bn.forward(x, mode)?;
        let h = self.dw.forward(&h, mode)?;
        let h = self.act.forward(&h);
        let h = self.pw.forward(&h, mode)?;
        x.add(&self.scale.forward(&h, mode)?)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.scale.backward(grad_out)?;
        let g = self.pw.backward(&g)?;
        let g = self.act.backward(&g)?;
        let g = self.dw.backward(&g)?;
        let g = self.bn.backward(&g)?;
        g.add(grad_out)
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        self.bn.collect(&join(prefix, "bn"), out);
        self.dw.collect(&join(prefix, "dw"), out);
        self.pw.collect(&join(prefix, "pw"), out);
        self.scale.collect(&join(prefix, "scale"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        self.bn.collect_mut(&join(prefix, "bn"), out);
        self.dw.collect_mut(&join(prefix, "dw"), out);
        self.pw.collect_mut(&join(prefix, "pw"), out);
        self.scale.collect_mut(&join(prefix, "scale"), out);
    }

    fn macs(&self) -> u64 {
        self.dw.macs() + self.pw.macs()
    }

    fn reset_macs(&mut self) {
        self.dw.reset_macs();
        self.pw.reset_macs();
    }
}

/// The plain residual block, followed by an MKS block unless the variant is `Base`.
#[derive(Debug, Clone)]
pub struct StageBlock<T> {
    pub base: BaseBlock<T>,
    pub mks: Option<MksBlock<T>>,
}

impl<T: Scalar> StageBlock<T> {
    pub fn new(stage: &StageConfig, variant: Variant, rng: &mut SplitMix64) -> Result<Self> {
        let base = BaseBlock::new(stage.channels, rng)?;
        let mks = if variant == Variant::Base {
            None
        } else {
            Some(MksBlock::new(stage.block(variant), rng)?)
        };
        Ok(Self { base, mks })
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.base.infer(x)?;
        match &self.mks {
            Some(m) => m.infer(&y),
            None => Ok(y),
        }
    }
}

impl<T: Scalar> Module<T> for StageBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.base.forward(x, mode)?;
        match &mut self.mks {
            Some(m) => m.forward(&y, mode),
            None => Ok(y),
        }
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = match &mut self.mks {
            Some(m) => m.backward(grad_out)?,
            None => grad_out.clone(),
        };
        self.base.backward(&g)
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        self.base.collect(&join(prefix, "base"), out);
        if let Some(m) = &self.mks {
            m.collect(prefix, out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        self.base.collect_mut(&join(prefix, "base"), out);
        if let Some(m) = &mut self.mks {
            m.collect_mut(prefix, out);
        }
    }

    fn macs(&self) -> u64 {
        self.base.macs() + self.mks.as_ref().map_or(0, |m| m.macs())
    }

    fn reset_macs(&mut self) {
        self.base.reset_macs();
        if let Some(m) = &mut self.mks {
            m.reset_macs();
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage<T> {
    pub downsample: Option<Downsample<T>>,
    pub blocks: Vec<StageBlock<T>>,
}

impl<T: Scalar> Stage<T> {
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = match &self.downsample {
            Some(d) => d.infer(x)?,
            None => x.clone(),
        };
        for b in &self.blocks {
            h = b.infer(&h)?;
        }
        Ok(h)
    }
}

impl<T: Scalar> Module<T> for Stage<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut h = match &mut self.downsample {
            Some(d) => d.forward(x, mode)?,
            None => x.clone(),
        };
        for b in &mut self.blocks {
            h = b.forward(&h, mode)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad_out.clone();
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        match &mut self.downsample {
            Some(d) => d.backward(&g),
            None => Ok(g),
        }
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        if let Some(d) = &self.downsample {
            d.collect(&join(prefix, "downsample"), out);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("block{i}")), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        if let Some(d) = &mut self.downsample {
            d.collect_mut(&join(prefix, "downsample"), out);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("block{i}")), out);
        }
    }

    fn macs(&self) -> u64 {
        self.downsample.as_ref().map_or(0, |d| d.macs()) + self.blocks.iter().map(|b| b.macs()).sum::<u64>()
    }

    fn reset_macs(&mut self) {
        if let Some(d) = &mut self.downsample {
            d.reset_macs();
        }
        for b in &mut self.blocks {
            b.reset_macs();
        }
    }
}

/// Patch embedding followed by the stages; yields one feature map per stage.
#[derive(Debug, Clone)]
pub struct Backbone<T> {
    config: BackboneConfig,
    pub patch_embed: PatchEmbed<T>,
    pub stages: Vec<Stage<T>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(config: BackboneConfig, rng: &mut SplitMix64) -> Result<Self> {
        config.validate()?;
        let patch_embed = PatchEmbed::new(&config, rng)?;
        let mut prev = config.patch_embed.channels;
        let mut stages = Vec::with_capacity(config.stages.len());
        for st in &config.stages {
            let downsample = if st.downsample {
                Some(Downsample::new(prev, st.channels, rng)?)
            } else {
                None
            };
            let blocks = (0..st.depth)
                .map(|_| StageBlock::new(st, config.variant, rng))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { downsample, blocks });
            prev = st.channels;
        }
        Ok(Self {
            config,
            patch_embed,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.channels != self.config.in_channels {
            return Err(Error::shape(
                "backbone",
                format!(
                    "expected {} input channels, got {}",
                    self.config.in_channels, s.channels
                ),
            ));
        }
        self.config.validate_input(s.height, s.width)
    }

    pub fn forward_features(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Vec<Tensor<T>>> {
        self.check_input(x)?;
        let mut h = self.patch_embed.forward(x, mode)?;
        let mut feats = Vec::with_capacity(self.stages.len());
        for st in &mut self.stages {
            h = st.forward(&h, mode)?;
            feats.push(h.clone());
        }
        Ok(feats)
    }

    /// `grads[i]` is the gradient arriving at stage `i`'s output, if any.
    pub fn backward_features(&mut self, grads: &[Option<Tensor<T>>]) -> Result<Tensor<T>> {
        if grads.len() != self.stages.len() {
            return Err(Error::shape(
                "backbone backward",
                format!("{} gradients for {} stages", grads.len(), self.stages.len()),
            ));
        }
        let mut g: Option<Tensor<T>> = None;
        for (st, extra) in self.stages.iter_mut().zip(grads).rev() {
            let total = match (g.take(), extra) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(b)?;
                    a
                }
                (Some(a), None) => a,
                (None, Some(b)) => b.clone(),
                (None, None) => continue,
            };
            g = Some(st.backward(&total)?);
        }
        let g = g.ok_or(Error::shape("backbone backward", "no gradient supplied"))?;
        self.patch_embed.backward(&g)
    }

    pub fn infer_features(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check_input(x)?;
        let mut h = self.patch_embed.infer(x)?;
        let mut feats = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            h = st.infer(&h)?;
            feats.push(h.clone());
        }
        Ok(feats)
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        self.patch_embed.collect(&join(prefix, "patch_embed"), out);
        for (i, st) in self.stages.iter().enumerate() {
            st.collect(&join(prefix, &format!("stage{i}")), out);
        }
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        self.patch_embed.collect_mut(&join(prefix, "patch_embed"), out);
        for (i, st) in self.stages.iter_mut().enumerate() {
            st.collect_mut(&join(prefix, &format!("stage{i}")), out);
        }
    }

    pub fn macs(&self) -> u64 {
        self.patch_embed.macs() + self.stages.iter().map(|s| s.macs()).sum::<u64>()
    }

    pub fn reset_macs(&mut self) {
        self.patch_embed.reset_macs();
        for s in &mut self.stages {
            s.reset_macs();
        }
    }

    /// Sets the residual scale of every block (plain and attention) to `v`.
    pub fn set_residual_scales(&mut self, v: T) {
        for st in &mut self.stages {
            for b in &mut st.blocks {
                b.base.scale.scale.value.fill(v);
                if let Some(m) = &mut b.mks {
                    m.set_residual_scales(v);
                }
            }
        }
    }
}

/// Backbone plus a 1×1 conv heatmap head on the last stage: one logit per cell.
///
/// This is the complete trainable state: every parameter and batch-norm
/// running statistic is reachable through [`Module::params`] under a unique
/// dotted name.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub backbone: Backbone<T>,
    pub head: Conv2d<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: BackboneConfig, rng: &mut SplitMix64) -> Result<Self> {
        let backbone = Backbone::new(config, rng)?;
        let c = backbone.config().output_channels();
        let head = Conv2d::new(ConvSpec::pointwise(c, 1), true, rng)?;
        Ok(Self { backbone, head })
    }

    /// Model seeded deterministically from `seed`.
    pub fn seeded(config: BackboneConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut SplitMix64::new(seed).fork(0x1417))
    }

    pub fn config(&self) -> &BackboneConfig {
        self.backbone.config()
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let feats = self.backbone.infer_features(x)?;
        self.head.infer(feats.last().ok_or(Error::shape("model", "no stages"))?)
    }

    /// Name → parameter map, sorted by name.
    pub fn state_dict(&self) -> BTreeMap<String, &Param<T>> {
        self.params().into_iter().collect()
    }

    /// Overwrites every tensor from `entries`; the name sets must match exactly.
    pub fn load_state(&mut self, entries: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != entries.len() {
            let missing: Vec<_> = params
                .iter()
                .filter(|(n, _)| !entries.contains_key(n))
                .map(|(n, _)| n.clone())
                .collect();
            return Err(Error::config(format!(
                "state has {} tensors, model expects {} (missing: {:?})",
                entries.len(),
                params.len(),
                missing
            )));
        }
        for (name, p) in params.iter_mut() {
            let t = entries
                .get(name)
                .ok_or_else(|| Error::config(format!("state is missing '{name}'")))?;
            p.set_value(t.clone())
                .map_err(|e| Error::config(format!("'{name}': {e}")))?;
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for Model<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let feats = self.backbone.forward_features(x, mode)?;
        self.head
            .forward(feats.last().ok_or(Error::shape("model", "no stages"))?, mode)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.head.backward(grad_out)?;
        let mut grads: Vec<Option<Tensor<T>>> = alloc::vec![None; self.backbone.stages.len()];
        if let Some(last) = grads.last_mut() {
            *last = Some(g);
        }
        self.backbone.backward_features(&grads)
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        self.backbone.collect(prefix, out);
        self.head.collect(&join(prefix, "head"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        self.backbone.collect_mut(prefix, out);
        self.head.collect_mut(&join(prefix, "head"), out);
    }

    fn macs(&self) -> u64 {
        self.backbone.macs() + self.head.macs()
    }

    fn reset_macs(&mut self) {
        self.backbone.reset_macs();
        self.head.reset_macs();
    }
}

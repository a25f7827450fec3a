//! Registry of gradient-checked units: every primitive operator and every
//! composite module, each on a small double-precision instance.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{
    ChannelAttention, ChannelAttentionConfig, MksBlock, MksBlockConfig, SpatialAttention, SpatialAttentionConfig,
};
use crate::backbone::{BackboneConfig, BaseBlock, Downsample, Model, PatchEmbed, PatchEmbedConfig, StageConfig};
use crate::data::bce_loss;
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck, Checkable, Faulty, FnCheck, GradCheckConfig, GradReport, ModuleCheck};
use crate::nn::{Linear, Module, Param, ParamRefsMut};
use crate::ops::{self, ConvSpec, Mode, RunningStats};
use crate::rng::SplitMix64;
use crate::tensor::{Shape, Tensor};

/// Tolerance for primitive operators.
pub const OP_TOLERANCE: f64 = 1e-6;
/// Tolerance for composite modules (longer chains accumulate more rounding).
pub const MODULE_TOLERANCE: f64 = 1e-5;
/// Finite-difference step for modules. Their train-mode batch norms are
/// strongly curved, so the O(ε²) truncation term dominates at the
/// operator step of 1e-4.
pub const MODULE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    Op,
    Module,
}

type RunFn = fn(&GradCheckConfig, f64) -> Result<GradReport>;

#[derive(Clone, Copy)]
pub struct CheckUnit {
    pub name: &'static str,
    pub kind: UnitKind,
    run: RunFn,
}

impl core::fmt::Debug for CheckUnit {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("CheckUnit")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .finish()
    }
}

impl CheckUnit {
    pub fn tolerance(&self) -> f64 {
        match self.kind {
            UnitKind::Op => OP_TOLERANCE,
            UnitKind::Module => MODULE_TOLERANCE,
        }
    }

    pub fn config(&self) -> GradCheckConfig {
        let cfg = GradCheckConfig::default().with_tolerance(self.tolerance());
        match self.kind {
            UnitKind::Op => cfg,
            UnitKind::Module => GradCheckConfig { eps: MODULE_EPS, ..cfg },
        }
    }

    /// Runs the check; `fault ≠ 0` scales the analytic gradient by `1 + fault`.
    pub fn run(&self, fault: f64) -> Result<GradReport> {
        (self.run)(&self.config(), fault)
    }
}

const fn op(name: &'static str, run: RunFn) -> CheckUnit {
    CheckUnit {
        name,
        kind: UnitKind::Op,
        run,
    }
}

const fn module(name: &'static str, run: RunFn) -> CheckUnit {
    CheckUnit {
        name,
        kind: UnitKind::Module,
        run,
    }
}

const UNITS: &[CheckUnit] = &[
    op("conv2d", conv2d),
    op("conv2d_strided_grouped", conv2d_strided_grouped),
    op("depthwise_dilated", depthwise_dilated),
    op("batchnorm_train", batchnorm_train),
    op("batchnorm_eval", batchnorm_eval),
    op("global_avg_pool", global_avg_pool),
    op("global_max_pool", global_max_pool),
    op("channel_mean", channel_mean),
    op("channel_max", channel_max),
    op("fully_connected", fully_connected),
    op("sigmoid", sigmoid),
    op("relu", relu),
    op("mul_broadcast", mul_broadcast),
    op("concat_channels", concat_channels),
    op("bce_loss", bce),
    module("linear", linear),
    module("sa_extract", sa_extract),
    module("sa_attention", sa_attention),
    module("sa_fuse", sa_fuse),
    module("sa_forward", sa_forward),
    module("ca_forward", ca_forward),
    module("mks_block_forward", mks_block_forward),
    module("base_block", base_block),
    module("downsample", downsample),
    module("patch_embed", patch_embed),
    module("backbone_head", backbone_head),
];

/// Every registered unit, operators first.
pub fn units() -> &'static [CheckUnit] {
    UNITS
}

pub fn find(name: &str) -> Option<&'static CheckUnit> {
    UNITS.iter().find(|u| u.name == name)
}

/// Units selected by `scope`: `all`, `ops`, `modules` or a unit name.
pub fn select(scope: &str) -> Result<Vec<&'static CheckUnit>> {
    let picked: Vec<_> = match scope {
        "all" => UNITS.iter().collect(),
        "ops" => UNITS.iter().filter(|u| u.kind == UnitKind::Op).collect(),
        "modules" => UNITS.iter().filter(|u| u.kind == UnitKind::Module).collect(),
        name => find(name).into_iter().collect(),
    };
    if picked.is_empty() {
        return Err(Error::config(format!("unknown gradcheck scope '{scope}'")));
    }
    Ok(picked)
}

fn check<C: Checkable>(name: &str, unit: C, cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    gradcheck(name, &mut Faulty { inner: unit, fault }, cfg)
}

/// Adds `±0.2` uniform noise to every learnable tensor, so that checks run at
/// a generic point: zero-initialized biases would otherwise create exact
/// ties in channel max pooling wherever a ReLU zeroes a whole feature vector.
fn jitter<M: Module<f64>>(mut module: M) -> M {
    let mut rng = SplitMix64::new(0x9e37);
    for (_, p) in module.params_mut() {
        if p.is_learnable() {
            for v in p.value.data_mut() {
                *v += rng.uniform_range(-0.2, 0.2);
            }
        }
    }
    module
}

fn module_unit<M: Module<f64>>(
    name: &str,
    module: M,
    input: Tensor<f64>,
    cfg: &GradCheckConfig,
    fault: f64,
) -> Result<GradReport> {
    check(name, ModuleCheck::new(jitter(module), input, Mode::Train), cfg, fault)
}

fn random(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

/// Distinct values at least 0.05 apart and away from zero, in random order:
/// no finite-difference step can cross a max/ReLU kink.
fn separated(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut vals: Vec<f64> = (0..shape.numel())
        .map(|i| (i as f64 - shape.numel() as f64 / 2.0 + 0.5) * 0.05)
        .collect();
    SplitMix64::new(seed).shuffle(&mut vals);
    Tensor::from_vec(shape, vals).expect("length matches shape")
}

fn conv_unit(name: &str, spec: ConvSpec, input: Shape, cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    let fwd = move |xs: &[Tensor<f64>]| ops::conv2d_forward(&xs[0], &xs[1], Some(&xs[2]), &spec);
    let bwd = move |xs: &[Tensor<f64>], g: &Tensor<f64>| {
        let r = ops::conv2d_backward(g, &xs[0], &xs[1], &spec, true)?;
        Ok(vec![r.input, r.weight, r.bias.ok_or(Error::NoCache("conv bias"))?])
    };
    let unit = FnCheck::new(
        vec![
            ("x", random(input, 1)),
            ("weight", random(spec.weight_shape(), 2)),
            ("bias", random(Shape::vector(1, spec.out_channels), 3)),
        ],
        &fwd,
        &bwd,
    );
    check(name, unit, cfg, fault)
}

fn conv2d(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    conv_unit("conv2d", ConvSpec::dense(3, 4, 3), Shape::new(2, 3, 5, 5), cfg, fault)
}

fn conv2d_strided_grouped(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    let spec = ConvSpec::dense(4, 6, 3).with_stride(2).with_groups(2);
    conv_unit("conv2d_strided_grouped", spec, Shape::new(2, 4, 6, 7), cfg, fault)
}

fn depthwise_dilated(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    let spec = ConvSpec::depthwise(3, 5, 2, 4);
    conv_unit("depthwise_dilated", spec, Shape::new(2, 3, 7, 6), cfg, fault)
}

fn batchnorm_unit(name: &str, mode: Mode, cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    let running = RunningStats {
        mean: Tensor::from_vec(Shape::vector(1, 3), vec![0.2, -0.1, 0.05])?,
        var: Tensor::from_vec(Shape::vector(1, 3), vec![0.8, 1.3, 0.5])?,
    };
    let r2 = running.clone();
    let fwd =
        move |xs: &[Tensor<f64>]| Ok(ops::batchnorm_forward(&xs[0], &xs[1], &xs[2], &mut running.clone(), mode)?.0);
    let bwd = move |xs: &[Tensor<f64>], g: &Tensor<f64>| {
        let (_, cache) = ops::batchnorm_forward(&xs[0], &xs[1], &xs[2], &mut r2.clone(), mode)?;
        let r = ops::batchnorm_backward(g, &cache, &xs[1])?;
        Ok(vec![r.input, r.gamma, r.beta])
    };
    let unit = FnCheck::new(
        vec![
            ("x", random(Shape::new(3, 3, 3, 4), 4).scale(2.0)),
            ("gamma", random(Shape::vector(1, 3), 5)),
            ("beta", random(Shape::vector(1, 3), 6)),
        ],
        &fwd,
        &bwd,
    );
    check(name, unit, cfg, fault)
}

fn batchnorm_train(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    batchnorm_unit("batchnorm_train", Mode::Train, cfg, fault)
}

fn batchnorm_eval(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    batchnorm_unit("batchnorm_eval", Mode::Eval, cfg, fault)
}

fn global_avg_pool(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    let fwd = |xs: &[Tensor<f64>]| ops::global_avg_pool(&xs[0]);
    let bwd = |xs: &[Tensor<f64>], g: &Tensor<f64>| Ok(vec![ops::global_avg_pool_backward(g, xs[0].shape())?]);
    let unit = FnCheck::new(vec![("x", random(Shape::new(2, 3, 4, 5), 7))], &fwd, &bwd);
    check("global_avg_pool", unit, cfg, fault)
}

fn global_max_pool(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    let fwd = |xs: &[Tensor<f64>]| Ok(ops::global_max_pool(&xs[0])?.0);
    let bwd = |xs: &[Tensor<f64>], g: &Tensor<f64>| {
        let (_, idx) = ops::global_max_pool(&xs[0])?;
        Ok(vec![ops::global_max_pool_backward(g, &idx, xs[0].shape())?])
    };
    let unit = FnCheck::new(vec![("x", separated(Shape::new(2, 3, 4, 5), 8))], &fwd, &bwd);
    check("global_max_pool", unit, cfg, fault)
}

fn channel_mean(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    let fwd = |xs: &[Tensor<f64>]| ops::channel_mean(&xs[0]);
    let bwd = |xs: &[Tensor<f64>], g: &Tensor<f64>| Ok(vec![ops::channel_mean_backward(g, xs[0].shape())?]);
    let unit = FnCheck::new(vec![("x", random(Shape::new(2, 4, 3, 3), 9))], &fwd, &bwd);
    check("channel_mean", unit, cfg, fault)
}

fn channel_max(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    let fwd = |xs: &[Tensor<f64>]| Ok(ops::channel_max(&xs[0])?.0);
    let bwd = |xs: &[Tensor<f64>], g: &Tensor<f64>| {
        let (_, idx) = ops::channel_max(&xs[0])?;
        Ok(vec![ops::channel_max_backward(g, &idx, xs[0].shape())?])
    };
    let unit = FnCheck::new(vec![("x", separated(Shape::new(2, 4, 3, 3), 10))], &fwd, &bwd);
    check("channel_max", unit, cfg, fault)
}

fn fully_connected(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    let fwd = |xs: &[Tensor<f64>]| ops::fully_connected(&xs[0], &xs[1], Some(&xs[2]));
    let bwd = |xs: &[Tensor<f64>], g: &Tensor<f64>| {
        let r = ops::fully_connected_backward(g, &xs[0], &xs[1])?;
        Ok(vec![r.input, r.weight, r.bias])
    };
    let unit = FnCheck::new(
        vec![
            ("x", random(Shape::vector(3, 5), 11)),
            ("weight", random(Shape::new(4, 5, 1, 1), 12)),
            ("bias", random(Shape::vector(1, 4), 13)),
        ],
        &fwd,
        &bwd,
    );
    check("fully_connected", unit, cfg, fault)
}

fn sigmoid(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    let fwd = |xs: &[Tensor<f64>]| Ok(ops::sigmoid(&xs[0]));
    let bwd = |xs: &[Tensor<f64>], g: &Tensor<f64>| Ok(vec![ops::sigmoid_backward(g, &ops::sigmoid(&xs[0]))?]);
    let unit = FnCheck::new(vec![("x", random(Shape::new(2, 3, 3, 3), 14).scale(4.0))], &fwd, &bwd);
    check("sigmoid", unit, cfg, fault)
}

fn relu(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    let fwd = |xs: &[Tensor<f64>]| Ok(ops::relu(&xs[0]));
    let bwd = |xs: &[Tensor<f64>], g: &Tensor<f64>| Ok(vec![ops::relu_backward(g, &xs[0])?]);
    let unit = FnCheck::new(vec![("x", separated(Shape::new(2, 3, 3, 3), 15))], &fwd, &bwd);
    check("relu", unit, cfg, fault)
}

fn mul_broadcast(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    let fwd = |xs: &[Tensor<f64>]| ops::mul_broadcast(&xs[0], &xs[1]);
    let bwd = |xs: &[Tensor<f64>], g: &Tensor<f64>| {
        let (ga, gb) = ops::mul_broadcast_backward(g, &xs[0], &xs[1])?;
        Ok(vec![ga, gb])
    };
    let unit = FnCheck::new(
        vec![
            ("a", random(Shape::new(2, 3, 4, 4), 16)),
            ("b", random(Shape::new(2, 1, 4, 4), 17)),
        ],
        &fwd,
        &bwd,
    );
    check("mul_broadcast", unit, cfg, fault)
}

fn concat_channels(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    let fwd = |xs: &[Tensor<f64>]| ops::concat_channels(&[&xs[0], &xs[1]]);
    let bwd =
        |xs: &[Tensor<f64>], g: &Tensor<f64>| ops::split_channels(g, &[xs[0].shape().channels, xs[1].shape().channels]);
    let unit = FnCheck::new(
        vec![
            ("a", random(Shape::new(2, 2, 3, 3), 18)),
            ("b", random(Shape::new(2, 3, 3, 3), 19)),
        ],
        &fwd,
        &bwd,
    );
    check("concat_channels", unit, cfg, fault)
}

/// The loss is a scalar; it is exposed as a `(1, 1, 1, 1)` tensor.
fn bce(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    let target = {
        let mut rng = SplitMix64::new(20);
        Tensor::from_fn(Shape::new(2, 1, 4, 4), |_| (rng.uniform() < 0.3) as u8 as f64)
    };
    let t2 = target.clone();
    let fwd = move |xs: &[Tensor<f64>]| Tensor::from_vec(Shape::vector(1, 1), vec![bce_loss(&xs[0], &target)?.0]);
    let bwd = move |xs: &[Tensor<f64>], g: &Tensor<f64>| Ok(vec![bce_loss(&xs[0], &t2)?.1.scale(g.data()[0])]);
    let unit = FnCheck::new(
        vec![("logits", random(Shape::new(2, 1, 4, 4), 21).scale(3.0))],
        &fwd,
        &bwd,
    );
    check("bce_loss", unit, cfg, fault)
}

fn linear(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    let layer = Linear::new(5, 3, &mut SplitMix64::new(22))?;
    module_unit("linear", layer, random(Shape::vector(2, 5), 23), cfg, fault)
}

fn small_sa(seed: u64) -> Result<SpatialAttention<f64>> {
    SpatialAttention::new(SpatialAttentionConfig::new(4, 2, 7), &mut SplitMix64::new(seed))
}

const SA_INPUT: Shape = Shape::new(2, 4, 6, 6);

/// One stage of the spatial attention module with hand-picked inputs.
struct SaStage {
    sa: SpatialAttention<f64>,
    inputs: Vec<(String, Param<f64>)>,
    stage: SaPart,
}

#[derive(Clone, Copy)]
enum SaPart {
    /// `x ↦ concat(X̃_1 … X̃_S)`.
    Extract,
    /// `T ↦ Sig`.
    Attention,
    /// `(x, T, Sig) ↦ O`.
    Fuse,
}

impl Checkable for SaStage {
    fn forward(&mut self) -> Result<Tensor<f64>> {
        let v = |i: usize| self.inputs[i].1.value.clone();
        match self.stage {
            SaPart::Extract => {
                let feats = self.sa.extract(&v(0), Mode::Train)?;
                let refs: Vec<&Tensor<f64>> = feats.iter().collect();
                ops::concat_channels(&refs)
            }
            SaPart::Attention => self.sa.attention(&v(0)),
            SaPart::Fuse => {
                let w = self.sa.config().branch_width();
                let parts = ops::split_channels(&v(1), &[w, w])?;
                self.sa.fuse(&v(0), &parts, &v(2))
            }
        }
    }

    fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<()> {
        match self.stage {
            SaPart::Extract => {
                let c = self.sa.config().channels;
                let gs = ops::split_channels(grad_out, &[c, c])?;
                let gx = self.sa.extract_backward(&gs)?;
                self.inputs[0].1.accumulate(&gx)
            }
            SaPart::Attention => {
                let gt = self.sa.attention_backward(grad_out)?;
                self.inputs[0].1.accumulate(&gt)
            }
            SaPart::Fuse => {
                let (gx, gt, gsig) = self.sa.fuse_backward(grad_out)?;
                let refs: Vec<&Tensor<f64>> = gt.iter().collect();
                self.inputs[0].1.accumulate(&gx)?;
                self.inputs[1].1.accumulate(&ops::concat_channels(&refs)?)?;
                self.inputs[2].1.accumulate(&gsig)
            }
        }
    }

    fn tensors(&mut self) -> ParamRefsMut<'_, f64> {
        let mut out: ParamRefsMut<'_, f64> = self.inputs.iter_mut().map(|(n, p)| (n.clone(), p)).collect();
        let prefix = "sa";
        match self.stage {
            SaPart::Extract => {
                for (i, b) in self.sa.branches.iter_mut().enumerate() {
                    b.spatial.collect_mut(&format!("{prefix}.branch{i}.spatial"), &mut out);
                    b.bn.collect_mut(&format!("{prefix}.branch{i}.bn"), &mut out);
                    b.pointwise
                        .collect_mut(&format!("{prefix}.branch{i}.pointwise"), &mut out);
                }
            }
            SaPart::Attention => self.sa.attn_conv.collect_mut("sa.attn_conv", &mut out),
            SaPart::Fuse => self.sa.out_conv.collect_mut("sa.out_conv", &mut out),
        }
        out
    }
}

fn sa_stage(
    name: &str,
    stage: SaPart,
    inputs: Vec<(&str, Tensor<f64>)>,
    cfg: &GradCheckConfig,
    fault: f64,
) -> Result<GradReport> {
    let unit = SaStage {
        sa: jitter(small_sa(24)?),
        inputs: inputs
            .into_iter()
            .map(|(n, t)| (String::from(n), Param::new(t)))
            .collect(),
        stage,
    };
    check(name, unit, cfg, fault)
}

fn sa_extract(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    sa_stage(
        "sa_extract",
        SaPart::Extract,
        vec![("x", random(SA_INPUT, 25))],
        cfg,
        fault,
    )
}

fn sa_attention(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    // channel max needs a margin between the per-pixel top two values
    sa_stage(
        "sa_attention",
        SaPart::Attention,
        vec![("t", separated(SA_INPUT, 26))],
        cfg,
        fault,
    )
}

fn sa_fuse(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    let sig = random(SA_INPUT.with_channels(2), 29).map(|v| 0.5 + 0.4 * v);
    sa_stage(
        "sa_fuse",
        SaPart::Fuse,
        vec![("x", random(SA_INPUT, 27)), ("t", random(SA_INPUT, 28)), ("sig", sig)],
        cfg,
        fault,
    )
}

fn sa_forward(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    module_unit("sa_forward", small_sa(30)?, random(SA_INPUT, 31), cfg, fault)
}

fn ca_forward(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    let ca = ChannelAttention::new(ChannelAttentionConfig::new(8, 2), &mut SplitMix64::new(32))?;
    module_unit("ca_forward", ca, random(Shape::new(2, 8, 4, 4), 33), cfg, fault)
}

fn mks_block_forward(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    let block = MksBlock::new(MksBlockConfig::new(4, 2, 7, 2), &mut SplitMix64::new(34))?;
    module_unit(
        "mks_block_forward",
        block,
        random(Shape::new(2, 4, 5, 5), 35),
        cfg,
        fault,
    )
}

fn base_block(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    let block = BaseBlock::new(4, &mut SplitMix64::new(36))?;
    module_unit("base_block", block, random(Shape::new(2, 4, 5, 5), 37), cfg, fault)
}

fn downsample(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    let layer = Downsample::new(3, 4, &mut SplitMix64::new(38))?;
    module_unit("downsample", layer, random(Shape::new(2, 3, 6, 6), 39), cfg, fault)
}

/// Two-stage backbone small enough for element-wise finite differences.
fn small_backbone() -> BackboneConfig {
    let stage = |channels, downsample| StageConfig {
        depth: 1,
        channels,
        branches: 2,
        max_size: 5,
        reduction: 2,
        downsample,
    };
    BackboneConfig {
        in_channels: 3,
        patch_embed: PatchEmbedConfig {
            kernel: 2,
            stride: 2,
            channels: 4,
        },
        stages: vec![stage(4, false), stage(4, true)],
        ..BackboneConfig::tiny()
    }
}

fn patch_embed(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    let layer = PatchEmbed::new(&small_backbone(), &mut SplitMix64::new(40))?;
    module_unit("patch_embed", layer, random(Shape::new(2, 3, 8, 8), 41), cfg, fault)
}

fn backbone_head(cfg: &GradCheckConfig, fault: f64) -> Result<GradReport> {
    let model = Model::seeded(small_backbone(), 42)?;
    module_unit("backbone_head", model, random(Shape::new(2, 3, 8, 8), 43), cfg, fault)
}

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::config::{BackboneConfig, Variant};
use crate::attention::KernelSchedule;
use crate::error::Result;

/// Parameter and compute cost of one layer for a single-image forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    /// Multiply-accumulates (convolutions and fully connected layers only).
    pub macs: u64,
}

impl LayerCost {
    /// Two floating point operations per multiply-accumulate.
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

struct Walker {
    out: Vec<LayerCost>,
}

impl Walker {
    fn push(&mut self, name: String, params: u64, macs: u64) {
        self.out.push(LayerCost { name, params, macs });
    }

    /// `k×k` conv over an `h×w` output grid.
    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: String, c_in: u64, c_out: u64, groups: u64, k: u64, bias: bool, h: u64, w: u64) {
        let per_output = (c_in / groups) * k * k;
        let params = c_out * per_output + if bias { c_out } else { 0 };
        self.push(name, params, per_output * c_out * h * w);
    }

    fn linear(&mut self, name: String, c_in: u64, c_out: u64) {
        self.push(name, c_in * c_out + c_out, c_in * c_out);
    }

    fn bn(&mut self, name: String, c: u64) {
        self.push(name, 2 * c, 0);
    }

    fn scale(&mut self, name: String, c: u64) {
        self.push(name, c, 0);
    }
}

/// Per-layer costs of the model described by `config` (backbone and head)
/// on an `h×w` input, derived from the configuration alone.
pub fn layer_costs(config: &BackboneConfig, height: usize, width: usize) -> Result<Vec<LayerCost>> {
    config.validate()?;
    config.validate_input(height, width)?;
    let mut wk = Walker { out: Vec::new() };
    let pe = config.patch_embed;
    let (mut h, mut w) = (
        ((height - pe.kernel) / pe.stride + 1) as u64,
        ((width - pe.kernel) / pe.stride + 1) as u64,
    );
    let mut c = pe.channels as u64;
    wk.conv(
        "patch_embed.conv".into(),
        config.in_channels as u64,
        c,
        1,
        pe.kernel as u64,
        false,
        h,
        w,
    );
    wk.bn("patch_embed.bn".into(), c);

    for (si, st) in config.stages.iter().enumerate() {
        let sp = format!("stage{si}");
        let co = st.channels as u64;
        if st.downsample {
            // 3×3, stride 2, padding 1
            h = (h + 2 - 3) / 2 + 1;
            w = (w + 2 - 3) / 2 + 1;
            wk.conv(format!("{sp}.downsample.conv"), c, co, 1, 3, false, h, w);
            wk.bn(format!("{sp}.downsample.bn"), co);
        }
        c = co;
        for bi in 0..st.depth {
            let bp = format!("{sp}.block{bi}");
            wk.bn(format!("{bp}.base.bn"), c);
            wk.conv(format!("{bp}.base.dw"), c, c, c, 3, true, h, w);
            wk.conv(format!("{bp}.base.pw"), c, c, 1, 1, true, h, w);
            wk.scale(format!("{bp}.base.scale"), c);
            if config.variant.channel_attention() {
                let hidden = c / st.reduction as u64;
                for mlp in ["avg_mlp", "max_mlp"] {
                    wk.linear(format!("{bp}.ca.{mlp}.reduce"), c, hidden);
                    wk.linear(format!("{bp}.ca.{mlp}.expand"), hidden, c);
                }
                wk.linear(format!("{bp}.ca.fuse"), c, c);
                wk.scale(format!("{bp}.ca_scale"), c);
            }
            if config.variant.spatial_attention() {
                let schedule = KernelSchedule::new(st.branches, st.max_size)?;
                let s = st.branches as u64;
                let cb = c / s;
                for (i, k) in schedule.entries().iter().enumerate() {
                    let p = format!("{bp}.sa.branch{i}");
                    wk.conv(format!("{p}.spatial"), c, c, c, k.size as u64, false, h, w);
                    wk.bn(format!("{p}.bn"), c);
                    wk.conv(format!("{p}.pointwise"), c, c, 1, 1, true, h, w);
                    wk.conv(format!("{p}.transform"), c, cb, 1, 1, true, h, w);
                }
                wk.conv(format!("{bp}.sa.attn_conv"), 2, s, 1, 7, true, h, w);
                wk.conv(format!("{bp}.sa.out_conv"), cb, c, 1, 1, true, h, w);
                wk.scale(format!("{bp}.sa_scale"), c);
            }
        }
    }
    wk.conv("head".into(), c, 1, 1, 1, true, h, w);
    Ok(wk.out)
}

/// FLOPs (2 × multiply-accumulates of convolutions and fully connected
/// layers) of one single-image forward pass.
pub fn count_flops(config: &BackboneConfig, height: usize, width: usize) -> Result<u64> {
    Ok(layer_costs(config, height, width)?.iter().map(LayerCost::flops).sum())
}

/// Learnable parameter count derived from the configuration.
pub fn count_params_closed_form(config: &BackboneConfig) -> Result<u64> {
    let s = config.total_stride();
    Ok(layer_costs(config, s, s)?.iter().map(|l| l.params).sum())
}

/// Ordering check helper used by the ablation tooling.
pub fn variant_params(config: &BackboneConfig, variant: Variant) -> Result<u64> {
    count_params_closed_form(&config.clone().with_variant(variant))
}

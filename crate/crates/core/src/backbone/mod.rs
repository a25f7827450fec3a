//! Patch embedding, stages of attention blocks, the heatmap head and
//! closed-form parameter/FLOP accounting.

mod config;
mod cost;
mod model;

pub use config::{BackboneConfig, PatchEmbedConfig, StageConfig, Variant};
pub use cost::{count_flops, count_params_closed_form, layer_costs, variant_params, LayerCost};
pub use model::{Backbone, BaseBlock, Downsample, Model, PatchEmbed, Stage, StageBlock};

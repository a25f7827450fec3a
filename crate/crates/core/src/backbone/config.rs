use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::attention::{KernelSchedule, MksBlockConfig};
use crate::error::{Error, Result};

/// Which attention modules the stage blocks carry on top of the plain
/// residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Base,
    BaseSa,
    BaseCa,
    BaseSaCa,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::BaseSa, Variant::BaseCa, Variant::BaseSaCa];

    pub const fn name(self) -> &'static str {
        match self {
            Variant::Base => "Base",
            Variant::BaseSa => "Base+SA",
            Variant::BaseCa => "Base+CA",
            Variant::BaseSaCa => "Base+SA+CA",
        }
    }

    pub const fn spatial_attention(self) -> bool {
        matches!(self, Variant::BaseSa | Variant::BaseSaCa)
    }

    pub const fn channel_attention(self) -> bool {
        matches!(self, Variant::BaseCa | Variant::BaseSaCa)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: alloc::string::String = s
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match norm.as_str() {
            "base" => Ok(Variant::Base),
            "base+sa" | "sa" => Ok(Variant::BaseSa),
            "base+ca" | "ca" => Ok(Variant::BaseCa),
            "base+sa+ca" | "base+ca+sa" | "full" | "mks" => Ok(Variant::BaseSaCa),
            _ => Err(Error::config(format!("unknown variant '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchEmbedConfig {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub depth: usize,
    pub channels: usize,
    pub branches: usize,
    pub max_size: usize,
    pub reduction: usize,
    /// Stride-2 3×3 conv + BN in front of the stage.
    pub downsample: bool,
}

impl StageConfig {
    pub fn block(&self, variant: Variant) -> MksBlockConfig {
        MksBlockConfig {
            channel_attention: variant.channel_attention(),
            spatial_attention: variant.spatial_attention(),
            ..MksBlockConfig::new(self.channels, self.branches, self.max_size, self.reduction)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub patch_embed: PatchEmbedConfig,
    pub stages: Vec<StageConfig>,
    pub variant: Variant,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl BackboneConfig {
    /// 4×4/4 patch embedding, depths [1, 2, 1], widths [32, 64, 128], S = 2,
    /// max kernel 7, reduction 4.
    pub fn tiny() -> Self {
        let stage = |depth, channels, downsample| StageConfig {
            depth,
            channels,
            branches: 2,
            max_size: 7,
            reduction: 4,
            downsample,
        };
        Self {
            in_channels: 3,
            patch_embed: PatchEmbedConfig {
                kernel: 4,
                stride: 4,
                channels: 32,
            },
            stages: vec![stage(1, 32, false), stage(2, 64, true), stage(1, 128, true)],
            variant: Variant::BaseSaCa,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Total downsampling factor from input to the last stage.
    pub fn total_stride(&self) -> usize {
        self.stages
            .iter()
            .fold(self.patch_embed.stride, |s, st| if st.downsample { s * 2 } else { s })
    }

    pub fn output_channels(&self) -> usize {
        self.stages.last().map_or(self.patch_embed.channels, |s| s.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let pe = &self.patch_embed;
        if self.in_channels == 0 || pe.kernel == 0 || pe.stride == 0 || pe.channels == 0 {
            return Err(Error::config(
                "patch_embed: kernel, stride and channels must be positive",
            ));
        }
        if self.stages.is_empty() {
            return Err(Error::config("backbone needs at least one stage"));
        }
        let mut prev = pe.channels;
        for (i, st) in self.stages.iter().enumerate() {
            if st.depth == 0 || st.channels == 0 {
                return Err(Error::config(format!("stage{i}: depth and channels must be positive")));
            }
            if st.channels < prev {
                return Err(Error::config(format!(
                    "stage{i}: width {} smaller than previous width {prev}",
                    st.channels
                )));
            }
            if !st.downsample && st.channels != prev {
                return Err(Error::config(format!(
                    "stage{i}: width change from {prev} to {} requires downsample",
                    st.channels
                )));
            }
            KernelSchedule::new(st.branches, st.max_size).map_err(|e| Error::config(format!("stage{i}: {e}")))?;
            if st.channels % st.branches != 0 {
                return Err(Error::config(format!(
                    "stage{i}: channels {} not divisible by branches {}",
                    st.channels, st.branches
                )));
            }
            if st.reduction == 0 || st.channels % st.reduction != 0 {
                return Err(Error::config(format!(
                    "stage{i}: channels {} not divisible by reduction {}",
                    st.channels, st.reduction
                )));
            }
            prev = st.channels;
        }
        Ok(())
    }

    /// Checks that an `h×w` input divides evenly through every stride.
    pub fn validate_input(&self, height: usize, width: usize) -> Result<()> {
        let s = self.total_stride();
        if height == 0 || width == 0 || !height.is_multiple_of(s) || !width.is_multiple_of(s) {
            return Err(Error::config(format!(
                "input {height}x{width} not divisible by total stride {s}"
            )));
        }
        if self.patch_embed.kernel != self.patch_embed.stride {
            // overlapping or gapped patches: the conv formula must still land exactly
            let k = self.patch_embed.kernel;
            if height < k || !(height - k).is_multiple_of(self.patch_embed.stride) {
                return Err(Error::config(format!(
                    "input {height}x{width} incompatible with patch kernel {k}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("Base+XY".parse::<Variant>().is_err());
    }

    #[test]
    fn tiny_config_is_valid() {
        let c = BackboneConfig::tiny();
        c.validate().unwrap();
        assert_eq!(c.total_stride(), 16);
        c.validate_input(64, 64).unwrap();
        assert!(c.validate_input(60, 64).is_err());
    }

    #[test]
    fn rejects_indivisible_widths() {
        let mut c = BackboneConfig::tiny();
        c.stages[1].reduction = 3;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::tiny();
        c.stages[2].channels = 16;
        assert!(c.validate().is_err());
    }
}

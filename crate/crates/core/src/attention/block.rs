use super::channel::{ChannelAttention, ChannelAttentionConfig};
use super::spatial::{SpatialAttention, SpatialAttentionConfig};
use crate::error::{Error, Result};
use crate::nn::{join, ChannelScale, Module, ParamRefs, ParamRefsMut};
use crate::ops::Mode;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MksBlockConfig {
    pub channels: usize,
    pub branches: usize,
    pub max_size: usize,
    pub reduction: usize,
    pub channel_attention: bool,
    pub spatial_attention: bool,
}

impl MksBlockConfig {
    /// Both attention modules enabled.
    pub fn new(channels: usize, branches: usize, max_size: usize, reduction: usize) -> Self {
        Self {
            channels,
            branches,
            max_size,
            reduction,
            channel_attention: true,
            spatial_attention: true,
        }
    }

    pub fn spatial(&self) -> SpatialAttentionConfig {
        SpatialAttentionConfig::new(self.channels, self.branches, self.max_size)
    }

    pub fn channel(&self) -> ChannelAttentionConfig {
        ChannelAttentionConfig::new(self.channels, self.reduction)
    }
}

/// Residual channel attention followed by residual spatial attention:
///
/// ```text
/// y   = x + λ_ca ⊙ CA(x)
/// out = y + λ_sa ⊙ SA(y)
/// ```
///
/// `λ` are per-channel scales initialized to 1. Either module can be left
/// out, in which case its residual branch is absent.
#[derive(Debug, Clone)]
pub struct MksBlock<T> {
    config: MksBlockConfig,
    pub ca: Option<(ChannelAttention<T>, ChannelScale<T>)>,
    pub sa: Option<(SpatialAttention<T>, ChannelScale<T>)>,
}

impl<T: Scalar> MksBlock<T> {
    pub fn new(config: MksBlockConfig, rng: &mut SplitMix64) -> Result<Self> {
        let ca = if config.channel_attention {
            Some((
                ChannelAttention::new(config.channel(), rng)?,
                ChannelScale::new(config.channels),
            ))
        } else {
            None
        };
        let sa = if config.spatial_attention {
            Some((
                SpatialAttention::new(config.spatial(), rng)?,
                ChannelScale::new(config.channels),
            ))
        } else {
            None
        };
        if ca.is_none() && sa.is_none() {
            return Err(Error::config("MKS block with neither attention module"));
        }
        Ok(Self { config, ca, sa })
    }

    pub fn config(&self) -> &MksBlockConfig {
        &self.config
    }

    /// Sets every residual scale to `v`.
    pub fn set_residual_scales(&mut self, v: T) {
        for (_, s) in self.ca.iter_mut() {
            s.scale.value.fill(v);
        }
        for (_, s) in self.sa.iter_mut() {
            s.scale.value.fill(v);
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = x.clone();
        if let Some((ca, scale)) = &self.ca {
            y.add_assign(&scale.infer(&ca.infer(x)?)?)?;
        }
        if let Some((sa, scale)) = &self.sa {
            let r = scale.infer(&sa.infer(&y)?)?;
            y.add_assign(&r)?;
        }
        Ok(y)
    }
}

impl<T: Scalar> Module<T> for MksBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut y = x.clone();
        if let Some((ca, scale)) = &mut self.ca {
            let r = ca.forward(x, mode)?;
            y.add_assign(&scale.forward(&r, mode)?)?;
        }
        if let Some((sa, scale)) = &mut self.sa {
            let r = sa.forward(&y, mode)?;
            y.add_assign(&scale.forward(&r, mode)?)?;
        }
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad_out.clone();
        if let Some((sa, scale)) = &mut self.sa {
            let gr = sa.backward(&scale.backward(&g)?)?;
            g.add_assign(&gr)?;
        }
        if let Some((ca, scale)) = &mut self.ca {
            let gr = ca.backward(&scale.backward(&g)?)?;
            g.add_assign(&gr)?;
        }
        Ok(g)
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        if let Some((ca, scale)) = &self.ca {
            ca.collect(&join(prefix, "ca"), out);
            scale.collect(&join(prefix, "ca_scale"), out);
        }
        if let Some((sa, scale)) = &self.sa {
            sa.collect(&join(prefix, "sa"), out);
            scale.collect(&join(prefix, "sa_scale"), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        if let Some((ca, scale)) = &mut self.ca {
            ca.collect_mut(&join(prefix, "ca"), out);
            scale.collect_mut(&join(prefix, "ca_scale"), out);
        }
        if let Some((sa, scale)) = &mut self.sa {
            sa.collect_mut(&join(prefix, "sa"), out);
            scale.collect_mut(&join(prefix, "sa_scale"), out);
        }
    }

    fn macs(&self) -> u64 {
        self.ca.as_ref().map_or(0, |(m, _)| m.macs()) + self.sa.as_ref().map_or(0, |(m, _)| m.macs())
    }

    fn reset_macs(&mut self) {
        if let Some((m, _)) = &mut self.ca {
            m.reset_macs();
        }
        if let Some((m, _)) = &mut self.sa {
            m.reset_macs();
        }
    }
}

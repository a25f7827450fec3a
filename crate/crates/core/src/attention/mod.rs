//! Multi-kernel selection attention: the spatial module (multi-scale dilated
//! depthwise branches weighted by a per-pixel selection map), the channel
//! module (pooled-statistics gating) and the block composing the two.

mod block;
mod channel;
mod schedule;
mod spatial;

pub use block::{MksBlock, MksBlockConfig};
pub use channel::{ChannelAttention, ChannelAttentionConfig};
pub use schedule::{BranchKernel, KernelSchedule};
pub use spatial::{SpatialAttention, SpatialAttentionConfig};

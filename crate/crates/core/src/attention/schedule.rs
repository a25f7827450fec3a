use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::ConvSpec;

/// Kernel size, dilation and padding of one spatial branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchKernel {
    pub size: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl BranchKernel {
    /// Extent covered by the dilated kernel: `(k − 1)·d + 1`.
    pub const fn span(&self) -> usize {
        (self.size - 1) * self.dilation + 1
    }

    /// Depthwise stride-1 convolution realizing this branch.
    pub const fn depthwise(&self, channels: usize) -> ConvSpec {
        ConvSpec::depthwise(channels, self.size, self.dilation, self.padding)
    }
}

/// Growing kernel sizes and dilations for `S` branches.
///
/// Branch `i` (0-based) uses `k = min(5 + 2i, max_size)`, `d = i + 1` and the
/// size-preserving padding `p = (k − 1)·d / 2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelSchedule {
    max_size: usize,
    entries: Vec<BranchKernel>,
}

impl KernelSchedule {
    pub fn new(branches: usize, max_size: usize) -> Result<Self> {
        if branches == 0 {
            return Err(Error::config("kernel schedule needs at least one branch"));
        }
        if max_size.is_multiple_of(2) || max_size < 5 {
            return Err(Error::config(format!(
                "max kernel size must be odd and at least 5, got {max_size}"
            )));
        }
        let entries = (0..branches)
            .map(|i| {
                let size = (5 + 2 * i).min(max_size);
                let dilation = i + 1;
                BranchKernel {
                    size,
                    dilation,
                    padding: (size - 1) * dilation / 2,
                }
            })
            .collect();
        Ok(Self { max_size, entries })
    }

    pub fn branches(&self) -> usize {
        self.entries.len()
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn entries(&self) -> &[BranchKernel] {
        &self.entries
    }

    /// Largest span over all branches.
    pub fn max_span(&self) -> usize {
        self.entries.iter().map(BranchKernel::span).max().unwrap_or(0)
    }
}

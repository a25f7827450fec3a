use alloc::format;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Geometry of a 2-D convolution. Padding is symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Dense `k×k` convolution, stride 1, "same" padding for odd `k`.
    pub const fn dense(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: 1,
            dilation: 1,
            padding: k / 2,
            groups: 1,
        }
    }

    /// Per-channel `k×k` convolution with dilation `d` and padding `p`.
    pub const fn depthwise(channels: usize, k: usize, dilation: usize, padding: usize) -> Self {
        Self {
            in_channels: channels,
            out_channels: channels,
            kernel: (k, k),
            stride: 1,
            dilation,
            padding,
            groups: channels,
        }
    }

    pub const fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::dense(in_channels, out_channels, 1)
    }

    pub const fn with_stride(self, stride: usize) -> Self {
        Self { stride, ..self }
    }

    pub const fn with_padding(self, padding: usize) -> Self {
        Self { padding, ..self }
    }

    pub const fn with_dilation(self, dilation: usize) -> Self {
        Self { dilation, ..self }
    }

    pub const fn with_groups(self, groups: usize) -> Self {
        Self { groups, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if self.in_channels == 0 || self.out_channels == 0 || kh == 0 || kw == 0 {
            return Err(Error::config(format!("conv {self:?}: zero-sized dimension")));
        }
        if self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::config(format!(
                "conv {self:?}: stride, dilation and groups must be positive"
            )));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::config(format!(
                "conv {self:?}: channels not divisible by groups"
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        )
    }

    /// Spatial span of one kernel tap pattern along each axis.
    pub fn span(&self) -> (usize, usize) {
        (
            (self.kernel.0 - 1) * self.dilation + 1,
            (self.kernel.1 - 1) * self.dilation + 1,
        )
    }

    /// `floor((n + 2p − d(k−1) − 1) / s) + 1` along each axis.
    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let (sh, sw) = self.span();
        let ph = height + 2 * self.padding;
        let pw = width + 2 * self.padding;
        if ph < sh || pw < sw {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {height}x{width} with padding {} smaller than kernel span {sh}x{sw}",
                    self.padding
                ),
            ));
        }
        Ok(((ph - sh) / self.stride + 1, (pw - sw) / self.stride + 1))
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let (ho, wo) = self.output_size(input.height, input.width)?;
        Ok(Shape::new(input.batch, self.out_channels, ho, wo))
    }

    /// Multiply-accumulates of one forward pass on `input`.
    pub fn macs(&self, input: Shape) -> Result<u64> {
        let out = self.output_shape(input)?;
        let taps = (self.in_channels / self.groups) * self.kernel.0 * self.kernel.1;
        Ok(out.numel() as u64 * taps as u64)
    }
}

/// Output indices `o` in `[lo, hi)` for which `o*stride + offset` lands in
/// `[0, in_len)`.
#[inline]
fn valid_range(offset: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(out_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

fn check_inputs<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Shape> {
    spec.validate()?;
    x.expect_nonempty("conv2d")?;
    if x.shape().channels != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input has {} channels, spec expects {}",
                x.shape().channels,
                spec.in_channels
            ),
        ));
    }
    weight.expect_shape("conv2d weight", spec.weight_shape())?;
    if let Some(b) = bias {
        b.expect_shape("conv2d bias", Shape::vector(1, spec.out_channels))?;
    }
    spec.output_shape(x.shape())
}

/// Direct convolution with zero padding, groups and dilation.
///
/// `weight` is `(out, in/groups, kh, kw)`, `bias` is `(1, out, 1, 1)`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let out_shape = check_inputs(x, weight, bias, spec)?;
    let xs = x.shape();
    let (kh, kw) = spec.kernel;
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let (ho, wo) = (out_shape.height, out_shape.width);
    let (s, d, p) = (spec.stride, spec.dilation as isize, spec.padding as isize);
    let wdata = weight.data();
    let mut out = Tensor::zeros(out_shape);

    for b in 0..xs.batch {
        for oc in 0..spec.out_channels {
            let g = oc / cout_g;
            let bias_v = bias.map_or(T::zero(), |bt| bt.data()[oc]);
            let plane = out.plane_mut(b, oc);
            plane.iter_mut().for_each(|v| *v = bias_v);
            for icg in 0..cin_g {
                let input = x.plane(b, g * cin_g + icg);
                let wbase = (oc * cin_g + icg) * kh * kw;
                for ky in 0..kh {
                    let oy = ky as isize * d - p;
                    let (oh_lo, oh_hi) = valid_range(oy, s, xs.height, ho);
                    for kx in 0..kw {
                        let w = wdata[wbase + ky * kw + kx];
                        let ox = kx as isize * d - p;
                        let (ow_lo, ow_hi) = valid_range(ox, s, xs.width, wo);
                        if ow_lo >= ow_hi || oh_lo >= oh_hi {
                            continue;
                        }
                        if s == 1 && ox == 0 && ow_lo == 0 && ow_hi == wo && wo == xs.width {
                            // full-width rows: one contiguous run covers them all
                            let ih0 = (oh_lo as isize + oy) as usize;
                            let n = (oh_hi - oh_lo) * wo;
                            let src = &input[ih0 * wo..ih0 * wo + n];
                            for (o, &v) in plane[oh_lo * wo..oh_lo * wo + n].iter_mut().zip(src) {
                                *o += w * v;
                            }
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = (oh * s) as isize + oy;
                            let in_row = &input[ih as usize * xs.width..(ih as usize + 1) * xs.width];
                            let out_row = &mut plane[oh * wo + ow_lo..oh * wo + ow_hi];
                            if s == 1 {
                                let start = (ow_lo as isize + ox) as usize;
                                let src = &in_row[start..start + (ow_hi - ow_lo)];
                                for (o, &v) in out_row.iter_mut().zip(src) {
                                    *o += w * v;
                                }
                            } else {
                                for (j, o) in out_row.iter_mut().enumerate() {
                                    let iw = ((ow_lo + j) * s) as isize + ox;
                                    *o += w * in_row[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Gradients of [`conv2d_forward`] given the upstream gradient.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    with_bias: bool,
) -> Result<ConvGrads<T>> {
    let out_shape = check_inputs(x, weight, None, spec)?;
    grad_out.expect_shape("conv2d backward", out_shape)?;
    let xs = x.shape();
    let (kh, kw) = spec.kernel;
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let (ho, wo) = (out_shape.height, out_shape.width);
    let (s, d, p) = (spec.stride, spec.dilation as isize, spec.padding as isize);
    let wdata = weight.data();

    let mut gx = Tensor::zeros(xs);
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = with_bias.then(|| Tensor::zeros(Shape::vector(1, spec.out_channels)));

    for b in 0..xs.batch {
        for oc in 0..spec.out_channels {
            let g = oc / cout_g;
            let gplane = grad_out.plane(b, oc);
            if let Some(gb) = gb.as_mut() {
                gb.data_mut()[oc] += gplane.iter().copied().sum::<T>();
            }
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                let wbase = (oc * cin_g + icg) * kh * kw;
                for ky in 0..kh {
                    let oy = ky as isize * d - p;
                    let (oh_lo, oh_hi) = valid_range(oy, s, xs.height, ho);
                    for kx in 0..kw {
                        let w = wdata[wbase + ky * kw + kx];
                        let ox = kx as isize * d - p;
                        let (ow_lo, ow_hi) = valid_range(ox, s, xs.width, wo);
                        if ow_lo >= ow_hi || oh_lo >= oh_hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        if s == 1 && ox == 0 && ow_lo == 0 && ow_hi == wo && wo == xs.width {
                            let ih0 = (oh_lo as isize + oy) as usize;
                            let n = (oh_hi - oh_lo) * wo;
                            let g_run = &gplane[oh_lo * wo..oh_lo * wo + n];
                            let in_run = &x.plane(b, ic)[ih0 * wo..ih0 * wo + n];
                            for (&gv, &iv) in g_run.iter().zip(in_run) {
                                acc += gv * iv;
                            }
                            let gin = &mut gx.plane_mut(b, ic)[ih0 * wo..ih0 * wo + n];
                            for (gi, &gv) in gin.iter_mut().zip(g_run) {
                                *gi += w * gv;
                            }
                            gw.data_mut()[wbase + ky * kw + kx] += acc;
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = ((oh * s) as isize + oy) as usize;
                            let g_row = &gplane[oh * wo + ow_lo..oh * wo + ow_hi];
                            let row_start = ih * xs.width;
                            if s == 1 {
                                let start = row_start + (ow_lo as isize + ox) as usize;
                                let n = ow_hi - ow_lo;
                                let in_seg = &x.plane(b, ic)[start..start + n];
                                for (&gv, &iv) in g_row.iter().zip(in_seg) {
                                    acc += gv * iv;
                                }
                                let gin = &mut gx.plane_mut(b, ic)[start..start + n];
                                for (gi, &gv) in gin.iter_mut().zip(g_row) {
                                    *gi += w * gv;
                                }
                            } else {
                                let input = x.plane(b, ic);
                                for (j, &gv) in g_row.iter().enumerate() {
                                    let iw = (((ow_lo + j) * s) as isize + ox) as usize;
                                    acc += gv * input[row_start + iw];
                                }
                                let gin = gx.plane_mut(b, ic);
                                for (j, &gv) in g_row.iter().enumerate() {
                                    let iw = (((ow_lo + j) * s) as isize + ox) as usize;
                                    gin[row_start + iw] += w * gv;
                                }
                            }
                        }
                        gw.data_mut()[wbase + ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

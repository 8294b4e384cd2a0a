//! Grouped 2-D convolution.
//!
//! Input channels are split into `groups` contiguous blocks of `group_size`
//! channels; output channel `o` belongs to group `o / (out_channels / groups)`
//! and reads only that block. `group_size == 1` is a depthwise convolution and
//! `groups == 1` a dense one. Convolutions carry no bias.
//!
//! "Same" padding follows the TensorFlow convention: the output extent is
//! `ceil(f / s)` and when the total padding is odd the extra row and column go
//! on the bottom and right.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Same,
    Valid,
}

/// Geometry of one grouped convolution applied to a `batch × in_channels ×
/// field × field` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub group_size: usize,
    pub groups: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub batch: usize,
    pub field: usize,
}

impl ConvSpec {
    /// A grouped convolution with `group_size` input channels per group. The
    /// batch and field default to 1 and the kernel size; set them with
    /// [`ConvSpec::with_input`].
    pub fn grouped(
        in_channels: usize,
        out_channels: usize,
        group_size: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if group_size == 0 || !in_channels.is_multiple_of(group_size) {
            return Err(Error::invalid(format!(
                "group size {group_size} does not divide {in_channels} input channels"
            )));
        }
        let spec = ConvSpec {
            in_channels,
            out_channels,
            group_size,
            groups: in_channels / group_size,
            kernel,
            stride,
            padding,
            batch: 1,
            field: kernel.max(1),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dense(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::grouped(in_channels, out_channels, in_channels, kernel, stride, Padding::Same)
    }

    pub fn with_input(mut self, batch: usize, field: usize) -> Self {
        self.batch = batch;
        self.field = field;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ConvSpec {
            in_channels,
            out_channels,
            group_size,
            groups,
            kernel,
            stride,
            batch,
            field,
            ..
        } = *self;
        if kernel == 0 || stride == 0 || group_size == 0 || groups == 0 {
            return Err(Error::invalid("kernel, stride, group size and groups must be >= 1"));
        }
        if batch == 0 || field == 0 || out_channels == 0 {
            return Err(Error::invalid("batch, field and output channels must be >= 1"));
        }
        if in_channels != group_size * groups {
            return Err(Error::invalid(format!(
                "{in_channels} input channels != group size {group_size} x {groups} groups"
            )));
        }
        if out_channels % groups != 0 {
            return Err(Error::invalid(format!(
                "{groups} groups do not divide {out_channels} output channels"
            )));
        }
        if self.padding == Padding::Valid && field < kernel {
            return Err(Error::invalid(format!(
                "field {field} is smaller than kernel {kernel} under valid padding"
            )));
        }
        Ok(())
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn output_extent(&self, field: usize) -> usize {
        match self.padding {
            Padding::Same => field.div_ceil(self.stride),
            Padding::Valid => (field - self.kernel) / self.stride + 1,
        }
    }

    /// Padding rows added before the first input row.
    pub fn pad_before(&self, field: usize) -> usize {
        match self.padding {
            Padding::Valid => 0,
            Padding::Same => {
                let out = self.output_extent(field);
                ((out - 1) * self.stride + self.kernel).saturating_sub(field) / 2
            }
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.group_size, self.kernel, self.kernel]
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.group_size * self.kernel * self.kernel
    }

    /// Multiply-accumulates for one forward pass at the spec's batch and field.
    pub fn macs(&self) -> u64 {
        let out = self.output_extent(self.field) as u64;
        self.batch as u64 * out * out * self.param_count() as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub weight: Tensor,
}

impl ConvWeights {
    pub fn new(spec: &ConvSpec, weight: Tensor) -> Result<Self> {
        if weight.shape() != spec.weight_shape() {
            return Err(Error::shape(format!(
                "weight {:?} does not match {:?}",
                weight.shape(),
                spec.weight_shape()
            )));
        }
        Ok(ConvWeights { weight })
    }

    pub fn zeros(spec: &ConvSpec) -> Self {
        ConvWeights {
            weight: Tensor::zeros(&spec.weight_shape()),
        }
    }

    /// Normal initialization with fan-out scaling, as used for EfficientNet.
    pub fn init(spec: &ConvSpec, rng: &mut Rng) -> Self {
        let fan_out = (spec.kernel * spec.kernel * spec.out_per_group()) as f64;
        ConvWeights {
            weight: rng.normal_tensor(&spec.weight_shape(), (2.0 / fan_out).sqrt()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len()
    }
}

/// State kept from the forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    pub input: Tensor,
    pub spec: ConvSpec,
}

fn check_input(x: &Tensor, spec: &ConvSpec) -> Result<[usize; 4]> {
    spec.validate()?;
    let [n, c, h, w] = x.dims4()?;
    if c != spec.in_channels {
        return Err(Error::shape(format!(
            "input has {c} channels, convolution expects {}",
            spec.in_channels
        )));
    }
    if n != spec.batch || h != spec.field || w != spec.field {
        return Err(Error::shape(format!(
            "input {:?} does not match batch {} and field {}",
            x.shape(),
            spec.batch,
            spec.field
        )));
    }
    Ok([n, c, h, w])
}

/// Valid output positions `[lo, hi)` along one axis for kernel offset `k`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, input: usize, output: usize) -> (usize, usize) {
    // input index = o * stride + k - pad must lie in [0, input)
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if input + pad > k {
        ((input + pad - k - 1) / stride + 1).min(output)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv_forward(x: &Tensor, weights: &ConvWeights, spec: &ConvSpec) -> Result<Tensor> {
    let [n, _, h, w] = check_input(x, spec)?;
    if weights.weight.shape() != spec.weight_shape() {
        return Err(Error::shape("weight shape does not match the spec"));
    }
    let (k, s, g_size) = (spec.kernel, spec.stride, spec.group_size);
    let (oh, ow) = (spec.output_extent(h), spec.output_extent(w));
    let (ph, pw) = (spec.pad_before(h), spec.pad_before(w));
    let opg = spec.out_per_group();
    let cin = spec.in_channels;
    let cout = spec.out_channels;
    let xd = x.data();
    let wd = weights.weight.data();
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let od = out.data_mut();
    for b in 0..n {
        for o in 0..cout {
            let group = o / opg;
            let obase = (b * cout + o) * oh * ow;
            let plane = &mut od[obase..obase + oh * ow];
            for ci in 0..g_size {
                let ibase = (b * cin + group * g_size + ci) * h * w;
                let input = &xd[ibase..ibase + h * w];
                for ky in 0..k {
                    let (y0, y1) = valid_range(ky, ph, s, h, oh);
                    for kx in 0..k {
                        let wv = wd[((o * g_size + ci) * k + ky) * k + kx];
                        let (x0, x1) = valid_range(kx, pw, s, w, ow);
                        for oy in y0..y1 {
                            let row = (oy * s + ky - ph) * w;
                            let orow = oy * ow;
                            for ox in x0..x1 {
                                plane[orow + ox] += wv * input[row + ox * s + kx - pw];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients with respect to the input and the weights.
pub fn conv_backward(grad_out: &Tensor, cache: &ConvCache, weights: &ConvWeights) -> Result<(Tensor, Tensor)> {
    let spec = &cache.spec;
    let x = &cache.input;
    let [n, _, h, w] = check_input(x, spec)?;
    let (oh, ow) = (spec.output_extent(h), spec.output_extent(w));
    if grad_out.shape() != [n, spec.out_channels, oh, ow] {
        return Err(Error::shape(format!(
            "output gradient {:?} does not match [{n}, {}, {oh}, {ow}]",
            grad_out.shape(),
            spec.out_channels
        )));
    }
    if weights.weight.shape() != spec.weight_shape() {
        return Err(Error::shape("weight shape does not match the spec"));
    }
    let (k, s, g_size) = (spec.kernel, spec.stride, spec.group_size);
    let (ph, pw) = (spec.pad_before(h), spec.pad_before(w));
    let opg = spec.out_per_group();
    let cin = spec.in_channels;
    let cout = spec.out_channels;
    let xd = x.data();
    let wd = weights.weight.data();
    let gd = grad_out.data();
    let mut grad_x = Tensor::zeros_like(x);
    let mut grad_w = Tensor::zeros_like(&weights.weight);
    let gxd = grad_x.data_mut();
    let gwd = grad_w.data_mut();
    for b in 0..n {
        for o in 0..cout {
            let group = o / opg;
            let obase = (b * cout + o) * oh * ow;
            let gplane = &gd[obase..obase + oh * ow];
            for ci in 0..g_size {
                let ibase = (b * cin + group * g_size + ci) * h * w;
                for ky in 0..k {
                    let (y0, y1) = valid_range(ky, ph, s, h, oh);
                    for kx in 0..k {
                        let widx = ((o * g_size + ci) * k + ky) * k + kx;
                        let wv = wd[widx];
                        let (x0, x1) = valid_range(kx, pw, s, w, ow);
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let row = ibase + (oy * s + ky - ph) * w;
                            for ox in x0..x1 {
                                let g = gplane[oy * ow + ox];
                                let xi = row + ox * s + kx - pw;
                                acc += g * xd[xi];
                                gxd[xi] += g * wv;
                            }
                        }
                        gwd[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((grad_x, grad_w))
}

/// The divisor of `channels` nearest to `requested`; ties go to the larger.
pub fn round_group_size(requested: usize, channels: usize) -> usize {
    let requested = requested.max(1);
    let channels = channels.max(1);
    (1..=channels)
        .filter(|d| channels.is_multiple_of(*d))
        .min_by_key(|&d| (d.abs_diff(requested), std::cmp::Reverse(d)))
        .unwrap_or(1)
}

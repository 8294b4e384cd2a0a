use serde::Serialize;

use crate::conv::{round_group_size, ConvSpec, Padding};
use crate::error::{Error, Result};
use crate::resolution::{parity_profile, Parity};

use super::config::{round_filters, round_repeats, ModelConfig, NormChoice};

pub const STEM_KERNEL: usize = 3;
pub const STEM_STRIDE: usize = 2;
pub const INPUT_CHANNELS: usize = 3;
pub const MIN_RESOLUTION: usize = 32;

/// One MBConv block after width/depth scaling and group-size resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BlockPlan {
    pub index: usize,
    pub stage: usize,
    pub repeat: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channels of the spatial convolution.
    pub expanded_channels: usize,
    pub expand: bool,
    /// Group size of the spatial convolution after rounding to a divisor.
    pub group_size: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Zero when the block has no squeeze-excite.
    pub se_channels: usize,
    pub residual: bool,
}

impl BlockPlan {
    pub fn expand_spec(&self) -> Option<ConvSpec> {
        self.expand
            .then(|| ConvSpec::dense(self.in_channels, self.expanded_channels, 1, 1).expect("valid pointwise conv"))
    }

    pub fn spatial_spec(&self) -> ConvSpec {
        ConvSpec::grouped(
            self.expanded_channels,
            self.expanded_channels,
            self.group_size,
            self.kernel,
            self.stride,
            Padding::Same,
        )
        .expect("group size divides the expanded width")
    }

    pub fn project_spec(&self) -> ConvSpec {
        ConvSpec::dense(self.expanded_channels, self.out_channels, 1, 1).expect("valid pointwise conv")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelPlan {
    pub stem_channels: usize,
    pub blocks: Vec<BlockPlan>,
    pub head_channels: usize,
    pub num_classes: usize,
    pub norm: NormChoice,
}

pub fn plan(config: &ModelConfig) -> Result<ModelPlan> {
    config.validate()?;
    let w = config.width_multiplier;
    let mut blocks = Vec::new();
    for (si, stage) in config.stages.iter().enumerate() {
        let repeats = round_repeats(stage.repeats, config.depth_multiplier);
        let stage_in = round_filters(stage.in_channels, w);
        let out = round_filters(stage.out_channels, w);
        for r in 0..repeats {
            let in_channels = if r == 0 { stage_in } else { out };
            let stride = if r == 0 { stage.stride } else { 1 };
            let ratio = if stage.expand { config.expansion_ratio } else { 1 };
            let expanded = if ratio == 1 { in_channels } else { round_filters(in_channels * ratio, 1.0) };
            let se_channels = if config.se_ratio > 0.0 {
                ((in_channels as f64 * config.se_ratio) as usize).max(1)
            } else {
                0
            };
            blocks.push(BlockPlan {
                index: blocks.len(),
                stage: si,
                repeat: r,
                in_channels,
                out_channels: out,
                expanded_channels: expanded,
                expand: ratio != 1,
                group_size: round_group_size(config.group_size, expanded),
                kernel: stage.kernel,
                stride,
                se_channels,
                residual: stride == 1 && in_channels == out,
            });
        }
    }
    for pair in blocks.windows(2) {
        if pair[0].out_channels != pair[1].in_channels {
            return Err(Error::invalid(format!(
                "stage widths do not chain: block {} emits {} channels, block {} expects {}",
                pair[0].index, pair[0].out_channels, pair[1].index, pair[1].in_channels
            )));
        }
    }
    let stem_channels = round_filters(config.stem_channels, w);
    if blocks[0].in_channels != stem_channels {
        return Err(Error::invalid("first stage input width differs from the stem width"));
    }
    Ok(ModelPlan {
        stem_channels,
        blocks,
        head_channels: round_filters(config.head_channels, w),
        num_classes: config.num_classes,
        norm: config.norm,
    })
}

impl ModelPlan {
    pub fn last_channels(&self) -> usize {
        self.blocks.last().map_or(self.stem_channels, |b| b.out_channels)
    }

    pub fn stem_spec(&self) -> ConvSpec {
        ConvSpec::dense(INPUT_CHANNELS, self.stem_channels, STEM_KERNEL, STEM_STRIDE).expect("valid stem")
    }

    pub fn head_spec(&self) -> ConvSpec {
        ConvSpec::dense(self.last_channels(), self.head_channels, 1, 1).expect("valid head")
    }

    /// Strides of the stem and of every spatial convolution, in order.
    pub fn strides(&self) -> Vec<usize> {
        std::iter::once(STEM_STRIDE)
            .chain(self.blocks.iter().map(|b| b.stride))
            .collect()
    }

    pub fn downsample_count(&self) -> usize {
        self.strides().iter().filter(|&&s| s == 2).count()
    }

    pub fn parity_profile(&self, resolution: u32) -> Result<Vec<Parity>> {
        parity_profile(resolution, &self.strides())
    }

    /// Every convolution in execution order with its input batch and field.
    pub fn convolutions(&self, batch: usize, resolution: usize) -> Result<Vec<(String, ConvSpec)>> {
        if resolution < MIN_RESOLUTION {
            return Err(Error::invalid(format!(
                "resolution {resolution} is below the minimum of {MIN_RESOLUTION}"
            )));
        }
        let mut out = Vec::new();
        let mut field = resolution;
        let stem = self.stem_spec().with_input(batch, field);
        field = stem.output_extent(field);
        out.push(("stem.conv".to_string(), stem));
        for b in &self.blocks {
            let name = |part: &str| format!("blocks.{}.{part}.conv", b.index);
            if let Some(spec) = b.expand_spec() {
                out.push((name("expand"), spec.with_input(batch, field)));
            }
            let spatial = b.spatial_spec().with_input(batch, field);
            field = spatial.output_extent(field);
            out.push((name("spatial"), spatial));
            out.push((name("project"), b.project_spec().with_input(batch, field)));
        }
        out.push(("head.conv".to_string(), self.head_spec().with_input(batch, field)));
        Ok(out)
    }
}

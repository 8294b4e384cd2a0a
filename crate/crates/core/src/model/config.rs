use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::norm::NormMethod;
use crate::resolution::TRAINING_RESOLUTIONS;

/// The (G, E) pairs of the group-size sweep: wider groups trade against a
/// narrower expansion so that parameters and FLOPs stay roughly level.
pub const GROUP_EXPANSION_SWEEP: [(usize, usize); 5] = [(1, 6), (4, 5), (16, 4), (32, 3), (64, 2)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelSize {
    B0,
    B1,
    B2,
    B3,
    B4,
    B5,
}

impl ModelSize {
    pub const ALL: [ModelSize; 6] = [
        ModelSize::B0,
        ModelSize::B1,
        ModelSize::B2,
        ModelSize::B3,
        ModelSize::B4,
        ModelSize::B5,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn width_multiplier(self) -> f64 {
        [1.0, 1.0, 1.1, 1.2, 1.4, 1.6][self.index()]
    }

    pub fn depth_multiplier(self) -> f64 {
        [1.0, 1.1, 1.2, 1.4, 1.8, 2.2][self.index()]
    }

    pub fn native_resolution(self) -> u32 {
        TRAINING_RESOLUTIONS[self.index()].0
    }

    pub fn half_resolution(self) -> u32 {
        TRAINING_RESOLUTIONS[self.index()].1
    }
}

impl fmt::Display for ModelSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "B{}", self.index())
    }
}

impl FromStr for ModelSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelSize::ALL
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown model size {s:?}; expected B0..B5")))
    }
}

/// One stage of MBConv blocks before width/depth scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub kernel: usize,
    pub repeats: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Whether blocks in this stage use the global expansion ratio. Stages
    /// without it keep a ratio of 1 and have no expansion convolution.
    pub expand: bool,
    pub stride: usize,
}

const fn stage(kernel: usize, repeats: usize, in_channels: usize, out_channels: usize, expand: bool, stride: usize) -> StageSpec {
    StageSpec {
        kernel,
        repeats,
        in_channels,
        out_channels,
        expand,
        stride,
    }
}

/// EfficientNet-B0 stage layout.
pub const BASELINE_STAGES: [StageSpec; 7] = [
    stage(3, 1, 32, 16, false, 1),
    stage(3, 2, 16, 24, true, 2),
    stage(5, 2, 24, 40, true, 2),
    stage(3, 3, 40, 80, true, 2),
    stage(5, 3, 80, 112, true, 1),
    stage(5, 4, 112, 192, true, 2),
    stage(3, 1, 192, 320, true, 1),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormChoice {
    pub method: NormMethod,
    #[serde(default)]
    pub proxy: bool,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for NormChoice {
    fn default() -> Self {
        NormChoice {
            method: NormMethod::Group(crate::norm::DEFAULT_GROUPS),
            proxy: false,
            activation: Activation::Swish,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub size: ModelSize,
    pub group_size: usize,
    pub expansion_ratio: usize,
    pub width_multiplier: f64,
    pub depth_multiplier: f64,
    pub native_resolution: u32,
    pub half_resolution: u32,
    #[serde(default)]
    pub norm: NormChoice,
    pub se_ratio: f64,
    pub num_classes: usize,
    pub stem_channels: usize,
    pub head_channels: usize,
    pub stages: Vec<StageSpec>,
    /// Applied to the pooled features in training mode.
    #[serde(default)]
    pub dropout_rate: f64,
}

impl ModelConfig {
    pub fn new(size: ModelSize, group_size: usize, expansion_ratio: usize) -> Self {
        ModelConfig {
            size,
            group_size,
            expansion_ratio,
            width_multiplier: size.width_multiplier(),
            depth_multiplier: size.depth_multiplier(),
            native_resolution: size.native_resolution(),
            half_resolution: size.half_resolution(),
            norm: NormChoice::default(),
            se_ratio: 0.25,
            num_classes: 1000,
            stem_channels: 32,
            head_channels: 1280,
            stages: BASELINE_STAGES.to_vec(),
            dropout_rate: 0.0,
        }
    }

    /// A two-stage network for tests and desk-scale training, sized for
    /// 32×32 inputs. Its layers are unscaled.
    pub fn tiny(group_size: usize, expansion_ratio: usize, num_classes: usize) -> Self {
        ModelConfig {
            width_multiplier: 1.0,
            depth_multiplier: 1.0,
            native_resolution: 32,
            half_resolution: 32,
            num_classes,
            stem_channels: 8,
            head_channels: 32,
            stages: vec![stage(3, 1, 8, 8, true, 2), stage(3, 2, 8, 16, true, 2)],
            ..ModelConfig::new(ModelSize::B0, group_size, expansion_ratio)
        }
    }

    pub fn with_norm(mut self, method: NormMethod, proxy: bool) -> Self {
        self.norm.method = method;
        self.norm.proxy = proxy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 || self.expansion_ratio == 0 {
            return Err(Error::invalid("group size and expansion ratio must be positive"));
        }
        if !(self.width_multiplier > 0.0 && self.depth_multiplier > 0.0) {
            return Err(Error::invalid("width and depth multipliers must be positive"));
        }
        if !(0.0..=1.0).contains(&self.se_ratio) {
            return Err(Error::invalid("se_ratio must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout_rate must lie in [0, 1)"));
        }
        if self.num_classes == 0 || self.stem_channels == 0 || self.head_channels == 0 {
            return Err(Error::invalid("channel and class counts must be positive"));
        }
        if self.stages.is_empty() {
            return Err(Error::invalid("at least one stage is required"));
        }
        for s in &self.stages {
            if s.kernel == 0 || s.repeats == 0 || s.in_channels == 0 || s.out_channels == 0 || !(1..=2).contains(&s.stride) {
                return Err(Error::invalid(format!("invalid stage {s:?}")));
            }
        }
        Ok(())
    }
}

/// Scales a channel count by the width multiplier and rounds to a multiple
/// of 8, never dropping more than 10%.
pub fn round_filters(channels: usize, width: f64) -> usize {
    let f = channels as f64 * width;
    let mut n = (((f + 4.0) as usize) / 8 * 8).max(8);
    if (n as f64) < 0.9 * f {
        n += 8;
    }
    n
}

pub fn round_repeats(repeats: usize, depth: f64) -> usize {
    (repeats as f64 * depth).ceil() as usize
}

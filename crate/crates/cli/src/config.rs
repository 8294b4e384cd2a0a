use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use effnet::activation::Activation;
use effnet::model::{FinetuneScope, ModelConfig, ModelSize};
use effnet::norm::NormMethod;
use effnet::tensor::Precision;
use serde::{Deserialize, Serialize};

/// Everything a run needs. Every field has a default, unknown keys are
/// rejected, and command-line flags override values read from `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub precision: Precision,
    pub model: ModelSection,
    /// Input resolution; the model's native resolution when absent.
    pub resolution: Option<u32>,
    pub roofline: RooflineSection,
    pub resolutions: ResolutionSection,
    pub train: TrainSection,
    pub finetune: FinetuneSection,
    pub verify: VerifySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("."),
            precision: Precision::F64,
            model: ModelSection::default(),
            resolution: None,
            roofline: RooflineSection::default(),
            resolutions: ResolutionSection::default(),
            train: TrainSection::default(),
            finetune: FinetuneSection::default(),
            verify: VerifySection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub size: ModelSize,
    pub group_size: usize,
    pub expansion: usize,
    pub norm: NormMethod,
    pub proxy: bool,
    pub activation: Activation,
    /// The two-stage desk-scale network instead of a full EfficientNet.
    pub tiny: bool,
    /// 1000 for full networks, 2 for the tiny one, when absent.
    pub num_classes: Option<usize>,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            size: ModelSize::B0,
            group_size: 1,
            expansion: 6,
            norm: NormMethod::Group(4),
            proxy: false,
            activation: Activation::Swish,
            tiny: false,
            num_classes: None,
            dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RooflineSection {
    pub batch: usize,
    /// JSON hardware profile: peak_flops, mem_bandwidth, bytes_per_element.
    pub hardware: Option<PathBuf>,
}

impl Default for RooflineSection {
    fn default() -> Self {
        RooflineSection { batch: 1, hardware: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResolutionSection {
    pub train: u32,
    pub max: u32,
    pub test: Option<u32>,
    pub downsamples: u32,
    pub csv: bool,
}

impl Default for ResolutionSection {
    fn default() -> Self {
        ResolutionSection {
            train: 224,
            max: 512,
            test: None,
            downsamples: 5,
            csv: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Directory with images.bin and labels.bin; synthetic blobs when absent.
    pub data: Option<PathBuf>,
    /// Size of the synthetic dataset.
    pub samples: usize,
    pub batch: usize,
    pub steps: usize,
    pub micro_batch: Option<usize>,
    pub base_lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub label_smoothing: Option<f64>,
    pub mixup_alpha: Option<f64>,
    pub cutmix_alpha: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            data: None,
            samples: 128,
            batch: 16,
            steps: 200,
            micro_batch: None,
            base_lr: None,
            weight_decay: None,
            label_smoothing: None,
            mixup_alpha: None,
            cutmix_alpha: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    /// Defaults to `<out>/train.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub scope: FinetuneScope,
    pub epochs: f64,
    pub batch: usize,
    pub initial_lr: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            checkpoint: None,
            scope: FinetuneScope::Last1,
            epochs: 2.0,
            batch: 512,
            initial_lr: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub instances: usize,
    pub mc_samples: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            instances: 20,
            mc_samples: 10_000_000,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let mut cfg = if m.tiny {
            ModelConfig::tiny(m.group_size, m.expansion, m.num_classes.unwrap_or(2))
        } else {
            let mut c = ModelConfig::new(m.size, m.group_size, m.expansion);
            if let Some(k) = m.num_classes {
                c.num_classes = k;
            }
            c
        };
        cfg.norm.method = m.norm;
        cfg.norm.proxy = m.proxy;
        cfg.norm.activation = m.activation;
        cfg.dropout_rate = m.dropout;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn input_resolution(&self) -> Result<u32> {
        let r = match self.resolution {
            Some(r) => r,
            None => self.model_config()?.native_resolution,
        };
        if r == 0 {
            bail!("resolution must be positive");
        }
        Ok(r)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

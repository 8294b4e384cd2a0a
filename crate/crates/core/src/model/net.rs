use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::norm::{NormLayer, RunningStats};
use crate::tensor::{Precision, Rng, Tensor};

use super::config::ModelConfig;
use super::layers::*;
use super::plan::{plan, BlockPlan, ModelPlan, INPUT_CHANNELS, MIN_RESOLUTION};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Batch statistics for batch norm; `seed` drives dropout.
    Train { seed: u64 },
}

impl Mode {
    fn training(self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub plan: BlockPlan,
    pub expand: Option<ConvNorm>,
    pub spatial: ConvNorm,
    pub se: Option<SqueezeExcite>,
    pub project: ConvNorm,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    expand: Option<ConvNormCache>,
    spatial: ConvNormCache,
    se: Option<SeCache>,
    project: ConvNormCache,
}

impl Block {
    fn forward(&self, x: &Tensor, mode: Mode, precision: Precision) -> Result<(Tensor, BlockCache)> {
        let training = mode.training();
        let (h, expand) = match &self.expand {
            Some(l) => {
                let (mut h, c) = l.forward(x, training)?;
                h.round_to(precision);
                (h, Some(c))
            }
            None => (x.clone(), None),
        };
        let (mut h, spatial) = self.spatial.forward(&h, training)?;
        h.round_to(precision);
        let (h, se) = match &self.se {
            Some(l) => {
                let (mut h, c) = l.forward(&h)?;
                h.round_to(precision);
                (h, Some(c))
            }
            None => (h, None),
        };
        let (mut out, project) = self.project.forward(&h, training)?;
        if self.plan.residual {
            out.add_assign(x)?;
        }
        out.round_to(precision);
        Ok((
            out,
            BlockCache {
                expand,
                spatial,
                se,
                project,
            },
        ))
    }

    fn backward(&mut self, cache: &BlockCache, grad: &Tensor) -> Result<Tensor> {
        let mut g = self.project.backward(&cache.project, grad)?;
        if let (Some(l), Some(c)) = (&mut self.se, &cache.se) {
            g = l.backward(c, &g)?;
        }
        g = self.spatial.backward(&cache.spatial, &g)?;
        if let (Some(l), Some(c)) = (&mut self.expand, &cache.expand) {
            g = l.backward(c, &g)?;
        }
        if self.plan.residual {
            g.add_assign(grad)?;
        }
        Ok(g)
    }

    fn update_running(&mut self, cache: &BlockCache) {
        if let (Some(l), Some(c)) = (&mut self.expand, &cache.expand) {
            l.update_running(c);
        }
        self.spatial.update_running(&cache.spatial);
        self.project.update_running(&cache.project);
    }

    fn params(&self, prefix: &str, f: Visit) {
        if let Some(l) = &self.expand {
            l.params(&format!("{prefix}.expand"), f);
        }
        self.spatial.params(&format!("{prefix}.spatial"), f);
        if let Some(l) = &self.se {
            l.params(&format!("{prefix}.se"), f);
        }
        self.project.params(&format!("{prefix}.project"), f);
    }

    fn params_mut(&mut self, prefix: &str, f: VisitMut) {
        if let Some(l) = &mut self.expand {
            l.params_mut(&format!("{prefix}.expand"), f);
        }
        self.spatial.params_mut(&format!("{prefix}.spatial"), f);
        if let Some(l) = &mut self.se {
            l.params_mut(&format!("{prefix}.se"), f);
        }
        self.project.params_mut(&format!("{prefix}.project"), f);
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stem: ConvNormCache,
    blocks: Vec<BlockCache>,
    head: ConvNormCache,
    head_shape: [usize; 4],
    features: Tensor,
    dropout_mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub plan: ModelPlan,
    pub stem: ConvNorm,
    pub blocks: Vec<Block>,
    pub head: ConvNorm,
    pub classifier: Dense,
    pub precision: Precision,
}

fn conv_norm(spec: crate::conv::ConvSpec, activation: Activation, proxy: bool, config: &ModelConfig, rng: &mut Rng) -> Result<ConvNorm> {
    let conv = Conv2d::new(spec, rng);
    let norm = NormLayer::new(config.norm.method, spec.out_channels, activation, proxy)?;
    Ok(ConvNorm {
        conv,
        norm: Norm::new(norm),
    })
}

/// Builds the network described by `config` with weights drawn from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    let plan = plan(config)?;
    let mut rng = Rng::new(seed);
    let act = config.norm.activation;
    let proxy = config.norm.proxy;
    let stem = conv_norm(plan.stem_spec(), act, proxy, config, &mut rng)?;
    let mut blocks = Vec::with_capacity(plan.blocks.len());
    for b in &plan.blocks {
        let expand = match b.expand_spec() {
            Some(spec) => Some(conv_norm(spec, act, proxy, config, &mut rng)?),
            None => None,
        };
        let spatial = conv_norm(b.spatial_spec(), act, proxy, config, &mut rng)?;
        let se = (b.se_channels > 0).then(|| SqueezeExcite::new(b.expanded_channels, b.se_channels, act, &mut rng));
        let project = conv_norm(b.project_spec(), Activation::Identity, false, config, &mut rng)?;
        blocks.push(Block {
            plan: *b,
            expand,
            spatial,
            se,
            project,
        });
    }
    let head = conv_norm(plan.head_spec(), act, proxy, config, &mut rng)?;
    let classifier = Dense::new(plan.head_channels, plan.num_classes, &mut rng);
    Ok(Model {
        config: config.clone(),
        plan,
        stem,
        blocks,
        head,
        classifier,
        precision: Precision::F64,
    })
}

impl Model {
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, ForwardCache)> {
        let [_, c, h, w] = x.dims4()?;
        if c != INPUT_CHANNELS {
            return Err(Error::shape(format!("expected {INPUT_CHANNELS} input channels, got {c}")));
        }
        if h != w || h < MIN_RESOLUTION {
            return Err(Error::invalid(format!(
                "input must be square and at least {MIN_RESOLUTION} pixels, got {h}×{w}"
            )));
        }
        let training = mode.training();
        let p = self.precision;
        let (mut h, stem) = self.stem.forward(x, training)?;
        h.round_to(p);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, c) = b.forward(&h, mode, p)?;
            h = out;
            blocks.push(c);
        }
        let (mut top, head) = self.head.forward(&h, training)?;
        top.round_to(p);
        let head_shape = top.dims4()?;
        let mut features = global_pool(&top)?;
        let rate = self.config.dropout_rate;
        let dropout_mask = match mode {
            Mode::Train { seed } if rate > 0.0 => {
                let mut rng = Rng::new(seed);
                let mask: Vec<f64> = (0..features.len())
                    .map(|_| if rng.uniform(0.0, 1.0) < rate { 0.0 } else { 1.0 / (1.0 - rate) })
                    .collect();
                for (v, m) in features.data_mut().iter_mut().zip(&mask) {
                    *v *= m;
                }
                Some(mask)
            }
            _ => None,
        };
        let mut logits = self.classifier.forward(&features)?;
        logits.round_to(p);
        Ok((
            logits,
            ForwardCache {
                stem,
                blocks,
                head,
                head_shape,
                features,
                dropout_mask,
            },
        ))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, Mode::Eval)?.0)
    }

    /// Accumulates parameter gradients for `grad_logits` and returns the
    /// gradient with respect to the input.
    pub fn backward(&mut self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<Tensor> {
        let mut g = self.classifier.backward(&cache.features, grad_logits)?;
        if let Some(mask) = &cache.dropout_mask {
            for (v, m) in g.data_mut().iter_mut().zip(mask) {
                *v *= m;
            }
        }
        let mut g = global_pool_backward(&g, cache.head_shape);
        g = self.head.backward(&cache.head, &g)?;
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = b.backward(c, &g)?;
        }
        self.stem.backward(&cache.stem, &g)
    }

    /// Folds batch statistics from a training pass into batch-norm running
    /// averages; a no-op for other normalizations.
    pub fn update_running(&mut self, cache: &ForwardCache) {
        self.stem.update_running(&cache.stem);
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            b.update_running(c);
        }
        self.head.update_running(&cache.head);
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(ParamView<'_>)) {
        self.stem.params("stem", f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&format!("blocks.{i}"), f);
        }
        self.head.params("head", f);
        self.classifier.classifier_params("classifier", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamViewMut<'_>)) {
        self.stem.params_mut("stem", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.params_mut(&format!("blocks.{i}"), f);
        }
        self.head.params_mut("head", f);
        self.classifier.classifier_params_mut("classifier", f);
    }

    fn conv_norms_mut(&mut self) -> Vec<(String, &mut ConvNorm)> {
        let mut out = vec![("stem.norm".to_string(), &mut self.stem)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if let Some(l) = &mut b.expand {
                out.push((format!("blocks.{i}.expand.norm"), l));
            }
            out.push((format!("blocks.{i}.spatial.norm"), &mut b.spatial));
            out.push((format!("blocks.{i}.project.norm"), &mut b.project));
        }
        out.push(("head.norm".to_string(), &mut self.head));
        out
    }

    /// Batch-norm running statistics by layer name; empty for other
    /// normalizations.
    pub fn running_stats(&self) -> Vec<(String, RunningStats)> {
        let mut layers = vec![("stem.norm".to_string(), &self.stem)];
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(l) = &b.expand {
                layers.push((format!("blocks.{i}.expand.norm"), l));
            }
            layers.push((format!("blocks.{i}.spatial.norm"), &b.spatial));
            layers.push((format!("blocks.{i}.project.norm"), &b.project));
        }
        layers.push(("head.norm".to_string(), &self.head));
        layers
            .into_iter()
            .filter_map(|(n, l)| l.norm.layer.running.clone().map(|r| (n, r)))
            .collect()
    }

    pub fn load_running_stats(&mut self, stats: &[(String, RunningStats)]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &RunningStats> = stats.iter().map(|(n, r)| (n.as_str(), r)).collect();
        for (name, l) in self.conv_norms_mut() {
            let Some(r) = &mut l.norm.layer.running else { continue };
            match lookup.get(name.as_str()) {
                Some(s) if s.mean.len() == r.mean.len() && s.var.len() == r.var.len() => *r = (*s).clone(),
                Some(_) => return Err(Error::shape(format!("running statistics for {name} have the wrong width"))),
                None => return Err(Error::invalid(format!("missing running statistics for {name}"))),
            }
        }
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| names.push(p.name));
        names
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.grad.fill(0.0));
    }

    /// Copies of every parameter, in visiting order.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| {
            out.push((p.name, Tensor::new(p.shape, p.value.to_vec()).expect("consistent parameter shape")));
        });
        out
    }

    /// Overwrites parameters from `(name, tensor)` pairs; every parameter
    /// must be present with its exact shape.
    pub fn load_snapshot(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &Tensor> = params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut err = None;
        self.visit_params_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match lookup.get(p.name.as_str()) {
                Some(t) if t.shape() == p.shape.as_slice() => p.value.copy_from_slice(t.data()),
                Some(t) => err = Some(Error::shape(format!("{}: {:?} vs {:?}", p.name, t.shape(), p.shape))),
                None => err = Some(Error::invalid(format!("missing parameter {}", p.name))),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FinetuneScope {
    #[serde(rename = "last-1")]
    Last1,
    #[serde(rename = "last-2")]
    Last2,
    #[serde(rename = "last-3")]
    Last3,
}

impl fmt::Display for FinetuneScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self {
            FinetuneScope::Last1 => 1,
            FinetuneScope::Last2 => 2,
            FinetuneScope::Last3 => 3,
        };
        write!(f, "last-{k}")
    }
}

impl FromStr for FinetuneScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last-1" => Ok(FinetuneScope::Last1),
            "last-2" => Ok(FinetuneScope::Last2),
            "last-3" => Ok(FinetuneScope::Last3),
            _ => Err(Error::invalid(format!("unknown scope {s:?}; expected last-1, last-2 or last-3"))),
        }
    }
}

/// Parameter names updated by each fine-tuning scope. `last1` is the head
/// convolution, its normalization and the classifier; `last2` adds every
/// block from the last downsampling block on, and `last3` every block from
/// the downsampling block before that (the stem when there is none).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Boundaries {
    pub last1: BTreeSet<String>,
    pub last2: BTreeSet<String>,
    pub last3: BTreeSet<String>,
}

impl Boundaries {
    pub fn scope(&self, scope: FinetuneScope) -> &BTreeSet<String> {
        match scope {
            FinetuneScope::Last1 => &self.last1,
            FinetuneScope::Last2 => &self.last2,
            FinetuneScope::Last3 => &self.last3,
        }
    }
}

pub fn block_boundaries(model: &Model) -> Boundaries {
    // None stands for the stem.
    let mut downsampling: Vec<Option<usize>> = vec![None];
    downsampling.extend(model.plan.blocks.iter().filter(|b| b.stride == 2).map(|b| Some(b.index)));
    let from = |k: usize| downsampling[downsampling.len().saturating_sub(k)];
    let names = model.param_names();
    let in_tail = |name: &str, start: Option<usize>| -> bool {
        if name.starts_with("head.") || name.starts_with("classifier.") {
            return true;
        }
        match start {
            None => true,
            Some(s) => name
                .strip_prefix("blocks.")
                .and_then(|r| r.split('.').next())
                .and_then(|i| i.parse::<usize>().ok())
                .is_some_and(|i| i >= s),
        }
    };
    let collect = |start: Option<Option<usize>>| -> BTreeSet<String> {
        names
            .iter()
            .filter(|n| match start {
                None => n.starts_with("head.") || n.starts_with("classifier."),
                Some(s) => in_tail(n, s),
            })
            .cloned()
            .collect()
    };
    Boundaries {
        last1: collect(None),
        last2: collect(Some(from(1))),
        last3: collect(Some(from(2))),
    }
}

#[cfg(test)]
mod tests {
    use super::super::config::ModelSize;
    use super::super::cost::count_cost;
    use super::*;
    use crate::norm::NormMethod;

    #[test]
    fn tiny_logits_shape() {
        let m = build_model(&ModelConfig::tiny(4, 4, 5), 1).unwrap();
        let x = Rng::new(2).normal_tensor(&[2, 3, 32, 32], 1.0);
        assert_eq!(m.logits(&x).unwrap().shape(), &[2, 5]);
        assert!(m.logits(&Tensor::zeros(&[1, 3, 16, 16])).is_err());
        assert!(m.logits(&Tensor::zeros(&[1, 1, 32, 32])).is_err());
    }

    #[test]
    fn materialized_parameters_match_the_counter() {
        for cfg in [
            ModelConfig::new(ModelSize::B0, 1, 6),
            ModelConfig::new(ModelSize::B0, 16, 4).with_norm(NormMethod::Layer, true),
            ModelConfig::tiny(4, 4, 3),
        ] {
            let m = build_model(&cfg, 0).unwrap();
            assert_eq!(m.param_count() as u64, count_cost(&cfg, 224).unwrap().params);
        }
    }

    #[test]
    fn b0_boundaries() {
        let m = build_model(&ModelConfig::new(ModelSize::B0, 1, 6), 0).unwrap();
        let b = block_boundaries(&m);
        let expected: BTreeSet<String> = [
            "head.conv.weight",
            "head.norm.gamma",
            "head.norm.beta",
            "classifier.weight",
            "classifier.bias",
        ]
        .into_iter()
        .map(String::from)
        .collect();
        assert_eq!(b.last1, expected);
        assert!(b.last1.is_subset(&b.last2) && b.last2.is_subset(&b.last3));
        assert!(b.last2.len() > b.last1.len() && b.last3.len() > b.last2.len());
        // the last downsampling block is block 11, the one before is block 5
        assert!(b.last2.contains("blocks.11.spatial.conv.weight"));
        assert!(!b.last2.contains("blocks.10.project.conv.weight"));
        assert!(b.last3.contains("blocks.5.expand.conv.weight"));
        assert!(!b.last3.contains("blocks.4.project.norm.beta"));
        assert!(!b.last3.contains("stem.conv.weight"));
    }

    #[test]
    fn snapshot_round_trip() {
        let cfg = ModelConfig::tiny(1, 4, 2);
        let a = build_model(&cfg, 1).unwrap();
        let mut b = build_model(&cfg, 2).unwrap();
        b.load_snapshot(&a.snapshot()).unwrap();
        let x = Rng::new(0).normal_tensor(&[1, 3, 32, 32], 1.0);
        assert_eq!(a.logits(&x).unwrap(), b.logits(&x).unwrap());
        assert!(b.load_snapshot(&a.snapshot()[1..]).is_err());
    }

    #[test]
    fn scope_names() {
        assert_eq!("last-2".parse::<FinetuneScope>().unwrap(), FinetuneScope::Last2);
        assert_eq!(FinetuneScope::Last3.to_string(), "last-3");
        assert!("last-4".parse::<FinetuneScope>().is_err());
    }
}

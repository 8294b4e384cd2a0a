use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::norm::RunningStats;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"EFFNCKPT";
const PARAM: &str = "param/";
const EMA: &str = "ema/";
const ACCUMULATOR: &str = "rmsprop.accumulator/";
const VELOCITY: &str = "rmsprop.velocity/";
const RUNNING_MEAN: &str = "running.mean/";
const RUNNING_VAR: &str = "running.var/";

pub type Named = Vec<(String, Tensor)>;

/// Everything needed to resume training or evaluate: parameters, RMSProp
/// state (empty after SGD fine-tuning), the EMA shadow, batch-norm running
/// statistics and progress counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Named,
    pub accumulator: Named,
    pub velocity: Named,
    pub ema: Option<Named>,
    pub running: Vec<(String, RunningStats)>,
    pub epoch: usize,
    pub step: usize,
    /// Canonical JSON of the recipe that produced the checkpoint.
    pub recipe: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    offset: u64,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    config: ModelConfig,
    epoch: usize,
    step: usize,
    recipe: String,
    tensors: Vec<Entry>,
}

fn mirrors(a: &Named, b: &Named) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|((n, t), (m, u))| n == m && t.shape() == u.shape())
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        if let Some(ema) = &self.ema {
            if !mirrors(ema, &self.params) {
                return Err(Error::shape("EMA shadow does not mirror the parameters"));
            }
        }
        for state in [&self.accumulator, &self.velocity] {
            if !state.is_empty() && !mirrors(state, &self.params) {
                return Err(Error::shape("optimizer state does not mirror the parameters"));
            }
        }
        Ok(())
    }

    /// The weights fine-tuning and evaluation start from.
    pub fn averaged(&self) -> &Named {
        self.ema.as_ref().unwrap_or(&self.params)
    }

    fn tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::new();
        let mut push = |prefix: &str, set: &Named| {
            out.extend(set.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())));
        };
        push(PARAM, &self.params);
        push(ACCUMULATOR, &self.accumulator);
        push(VELOCITY, &self.velocity);
        if let Some(ema) = &self.ema {
            push(EMA, ema);
        }
        for (n, r) in &self.running {
            out.push((format!("{RUNNING_MEAN}{n}"), Tensor::new(vec![r.mean.len()], r.mean.clone())?));
            out.push((format!("{RUNNING_VAR}{n}"), Tensor::new(vec![r.var.len()], r.var.clone())?));
        }
        Ok(out)
    }

    /// Magic, index length (u64 LE), JSON index, then the tensors
    /// back to back. Offsets are relative to the first tensor.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let tensors = self.tensors()?;
        let mut blobs = Vec::new();
        let mut entries = Vec::with_capacity(tensors.len());
        for (name, t) in &tensors {
            entries.push(Entry {
                name: name.clone(),
                offset: blobs.len() as u64,
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
            });
            t.write_to(&mut blobs)?;
        }
        let index = serde_json::to_vec(&Index {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            recipe: self.recipe.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + index.len() + blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(index.len() as u64).to_le_bytes());
        out.extend_from_slice(&index);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| Error::Format("truncated checkpoint index".into()))?;
        let index: Index = serde_json::from_slice(body)?;
        let blobs = &bytes[16 + len..];
        let mut ck = Checkpoint {
            config: index.config,
            params: vec![],
            accumulator: vec![],
            velocity: vec![],
            ema: None,
            running: vec![],
            epoch: index.epoch,
            step: index.step,
            recipe: index.recipe,
        };
        let mut means: Vec<(String, Vec<f64>)> = vec![];
        let mut vars: Vec<(String, Vec<f64>)> = vec![];
        for e in index.tensors {
            if e.dtype != "f64" {
                return Err(Error::Format(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let start = usize::try_from(e.offset)
                .ok()
                .filter(|&o| o <= blobs.len())
                .ok_or_else(|| Error::Format(format!("{}: offset out of range", e.name)))?;
            let t = Tensor::read_from(&blobs[start..])?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!("{}: index shape disagrees with data", e.name)));
            }
            let split = |p: &str| e.name.strip_prefix(p).map(String::from);
            if let Some(n) = split(PARAM) {
                ck.params.push((n, t));
            } else if let Some(n) = split(ACCUMULATOR) {
                ck.accumulator.push((n, t));
            } else if let Some(n) = split(VELOCITY) {
                ck.velocity.push((n, t));
            } else if let Some(n) = split(EMA) {
                ck.ema.get_or_insert_with(Vec::new).push((n, t));
            } else if let Some(n) = split(RUNNING_MEAN) {
                means.push((n, t.into_data()));
            } else if let Some(n) = split(RUNNING_VAR) {
                vars.push((n, t.into_data()));
            } else {
                return Err(Error::Format(format!("unknown checkpoint entry {}", e.name)));
            }
        }
        if means.len() != vars.len() {
            return Err(Error::Format("running means and variances do not pair up".into()));
        }
        for ((n, mean), (m, var)) in means.into_iter().zip(vars) {
            if n != m {
                return Err(Error::Format(format!("running statistics for {n} and {m} do not pair up")));
            }
            ck.running.push((n, RunningStats { mean, var }));
        }
        ck.validate()?;
        Ok(ck)
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut tmp: PathBuf = path.to_path_buf();
        let mut name = path
            .file_name()
            .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?
            .to_os_string();
        name.push(".tmp");
        tmp.set_file_name(name);
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;
    use crate::norm::NormMethod;

    fn sample() -> Checkpoint {
        let config = ModelConfig::tiny(4, 2, 2).with_norm(NormMethod::Batch, false);
        let mut model = build_model(&config, 3).unwrap();
        let params = model.snapshot();
        model.classifier.bias[0] = 0.5;
        Checkpoint {
            config,
            accumulator: params.iter().map(|(n, t)| (n.clone(), t.scale(0.1))).collect(),
            velocity: params.iter().map(|(n, t)| (n.clone(), t.scale(-0.2))).collect(),
            ema: Some(model.snapshot()),
            running: model.running_stats(),
            params,
            epoch: 3,
            step: 17,
            recipe: "{}".into(),
        }
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        assert!(!ck.running.is_empty());
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn atomic_save() {
        let dir = std::env::temp_dir().join(format!("effnet-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert!(!dir.join("run.ckpt.tmp").exists());
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn rejects_mismatched_shadow() {
        let mut ck = sample();
        ck.ema.as_mut().unwrap().pop();
        assert!(ck.to_bytes().is_err());
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
    }
}

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FinetuneScope;
use crate::tensor::{Precision, Tensor};

pub const RMSPROP_MOMENTUM: f64 = 0.9;
/// Added to the squared-gradient accumulator inside the square root.
pub const RMSPROP_DELTA: f64 = 1e-3;
pub const LR_DECAY_FACTOR: f64 = 0.97;
pub const LR_DECAY_EPOCHS: f64 = 2.4;
pub const WEIGHT_DECAY: f64 = 1e-5;
pub const LABEL_SMOOTHING: f64 = 0.1;
pub const EMA_DECAY: f64 = 0.97;
pub const MIX_ALPHA: f64 = 0.2;
pub const FINETUNE_LR: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecipe {
    pub global_batch: usize,
    pub base_lr: f64,
    pub rmsprop_momentum: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_delta: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epochs: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub epochs: f64,
    pub ema_decay: f64,
    /// Zero disables the augmentation.
    pub mixup_alpha: f64,
    pub cutmix_alpha: f64,
    /// Split each batch into micro-batches of this size and accumulate.
    #[serde(default)]
    pub micro_batch: Option<usize>,
}

impl TrainRecipe {
    /// The recipe for global batch `b`: learning rate `b·2⁻¹⁴` and RMSProp
    /// decay `1 − b·2⁻¹⁴`.
    pub fn for_batch(global_batch: usize, epochs: f64) -> Self {
        let scaled = global_batch as f64 * 2f64.powi(-14);
        TrainRecipe {
            global_batch,
            base_lr: scaled,
            rmsprop_momentum: RMSPROP_MOMENTUM,
            rmsprop_decay: 1.0 - scaled,
            rmsprop_delta: RMSPROP_DELTA,
            lr_decay_factor: LR_DECAY_FACTOR,
            lr_decay_epochs: LR_DECAY_EPOCHS,
            weight_decay: WEIGHT_DECAY,
            label_smoothing: LABEL_SMOOTHING,
            epochs,
            ema_decay: EMA_DECAY,
            mixup_alpha: MIX_ALPHA,
            cutmix_alpha: MIX_ALPHA,
            micro_batch: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.global_batch == 0 {
            return Err(Error::invalid("global_batch must be positive"));
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            return Err(Error::invalid(format!(
                "rmsprop_decay {} must lie in (0, 1); global batches of 16384 or more are not supported",
                self.rmsprop_decay
            )));
        }
        let positive = [
            ("base_lr", self.base_lr),
            ("rmsprop_delta", self.rmsprop_delta),
            ("lr_decay_factor", self.lr_decay_factor),
            ("lr_decay_epochs", self.lr_decay_epochs),
            ("epochs", self.epochs),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        let unit = [
            ("rmsprop_momentum", self.rmsprop_momentum),
            ("label_smoothing", self.label_smoothing),
            ("ema_decay", self.ema_decay),
        ];
        for (name, v) in unit {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.weight_decay < 0.0 || self.mixup_alpha < 0.0 || self.cutmix_alpha < 0.0 {
            return Err(Error::invalid("weight decay and mixing strengths must be non-negative"));
        }
        if let Some(m) = self.micro_batch {
            if m == 0 || !self.global_batch.is_multiple_of(m) {
                return Err(Error::invalid(format!(
                    "micro_batch {m} must divide global_batch {}",
                    self.global_batch
                )));
            }
        }
        Ok(())
    }

    /// Canonical JSON of the recipe, stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        serde_json::to_string(self).expect("recipe serializes")
    }
}

/// Staircase schedule: `base_lr · factor^⌊epoch / decay_epochs⌋`.
pub fn lr_at(recipe: &TrainRecipe, epoch: f64) -> f64 {
    let k = (epoch.max(0.0) / recipe.lr_decay_epochs).floor();
    recipe.base_lr * recipe.lr_decay_factor.powf(k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneRecipe {
    pub epochs: f64,
    pub batch: usize,
    pub initial_lr: f64,
    pub scope: FinetuneScope,
    pub label_smoothing: f64,
}

impl FinetuneRecipe {
    pub fn new(scope: FinetuneScope) -> Self {
        FinetuneRecipe {
            epochs: 2.0,
            batch: 512,
            initial_lr: FINETUNE_LR,
            scope,
            label_smoothing: LABEL_SMOOTHING,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.epochs > 0.0) || !(self.initial_lr > 0.0) {
            return Err(Error::invalid("fine-tuning batch, epochs and learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid("label_smoothing must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Cosine decay from `initial` at `progress = 0` to zero at `progress = 1`.
pub fn cosine_lr(initial: f64, progress: f64) -> f64 {
    let t = progress.clamp(0.0, 1.0);
    0.5 * initial * (1.0 + (PI * t).cos())
}

/// Per-parameter RMSProp state.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsState {
    pub accumulator: Vec<f64>,
    pub velocity: Vec<f64>,
}

impl RmsState {
    pub fn zeros(len: usize) -> Self {
        RmsState {
            accumulator: vec![0.0; len],
            velocity: vec![0.0; len],
        }
    }
}

/// One RMSProp step with momentum:
///
/// ```text
/// g ← g + λ·p          (decayed parameters only)
/// a ← ρ·a + (1 − ρ)·g²
/// v ← μ·v + lr·g / √(a + δ)
/// p ← p − v
/// ```
pub fn rmsprop_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut RmsState,
    recipe: &TrainRecipe,
    lr: f64,
    decayed: bool,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.accumulator.len() != n || state.velocity.len() != n {
        return Err(Error::shape(format!(
            "rmsprop: {n} parameters, {} gradients, {}/{} state entries",
            grads.len(),
            state.accumulator.len(),
            state.velocity.len()
        )));
    }
    let rho = recipe.rmsprop_decay;
    let wd = if decayed { recipe.weight_decay } else { 0.0 };
    for i in 0..n {
        let g = grads[i] + wd * params[i];
        let a = rho * state.accumulator[i] + (1.0 - rho) * g * g;
        state.accumulator[i] = a;
        let v = recipe.rmsprop_momentum * state.velocity[i] + lr * g / (a + recipe.rmsprop_delta).sqrt();
        state.velocity[i] = v;
        params[i] -= v;
    }
    Ok(())
}

/// `shadow ← decay·shadow + (1 − decay)·params`; the first call copies.
pub fn ema_update(shadow: &mut Option<Vec<Tensor>>, params: &[Tensor], decay: f64) -> Result<()> {
    match shadow {
        None => *shadow = Some(params.to_vec()),
        Some(s) => {
            if s.len() != params.len() {
                return Err(Error::shape("EMA shadow and parameters differ in count"));
            }
            for (a, p) in s.iter_mut().zip(params) {
                a.expect_same_shape(p)?;
                for (x, y) in a.data_mut().iter_mut().zip(p.data()) {
                    *x = decay * *x + (1.0 - decay) * y;
                }
            }
        }
    }
    Ok(())
}

/// Smoothed one-hot targets: `1 − s` on the label plus `s / classes`
/// everywhere.
pub fn smoothed_targets(labels: &[usize], classes: usize, smoothing: f64) -> Result<Tensor> {
    let mut t = Tensor::full(&[labels.len(), classes], smoothing / classes as f64);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::invalid(format!("label {l} out of range for {classes} classes")));
        }
        t.data_mut()[i * classes + l] += 1.0 - smoothing;
    }
    Ok(t)
}

/// Mean cross-entropy of `logits` against target distributions and its
/// gradient with respect to the logits.
pub fn soft_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    logits.expect_same_shape(targets)?;
    let (n, k) = match logits.shape() {
        &[n, k] if n > 0 && k > 0 => (n, k),
        s => return Err(Error::shape(format!("logits must be [batch, classes], got {s:?}"))),
    };
    let (l, t) = (logits.data(), targets.data());
    let mut grad = Tensor::zeros(&[n, k]);
    let g = grad.data_mut();
    let mut loss = 0.0;
    for b in 0..n {
        let row = &l[b * k..(b + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let mass: f64 = t[b * k..(b + 1) * k].iter().sum();
        for c in 0..k {
            let logp = row[c] - lse;
            loss -= t[b * k + c] * logp;
            g[b * k + c] = (mass * logp.exp() - t[b * k + c]) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

pub fn smoothed_cross_entropy(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<(f64, Tensor)> {
    let k = logits.shape().get(1).copied().unwrap_or(0);
    if logits.shape().first() != Some(&labels.len()) {
        return Err(Error::shape("one label per logit row is required"));
    }
    soft_cross_entropy(logits, &smoothed_targets(labels, k, smoothing)?)
}

pub(crate) fn round_params(values: &mut [f64], precision: Precision) {
    if precision == Precision::F32 {
        values.iter_mut().for_each(|v| *v = precision.round(*v));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn batch_768_arithmetic() {
        let r = TrainRecipe::for_batch(768, 350.0);
        assert_eq!(r.base_lr, 0.046875);
        assert_eq!(r.rmsprop_decay, 0.953125);
        r.validate().unwrap();
        assert!(TrainRecipe::for_batch(16384, 1.0).validate().is_err());
    }

    #[test]
    fn staircase() {
        let r = TrainRecipe::for_batch(768, 350.0);
        assert_eq!(lr_at(&r, 0.0), r.base_lr);
        assert_eq!(lr_at(&r, 2.39), r.base_lr);
        assert!((lr_at(&r, 2.4) - r.base_lr * 0.97).abs() < 1e-15);
        assert!((lr_at(&r, 24.0) - r.base_lr * 0.97f64.powi(10)).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for i in 0..1000 {
            let lr = lr_at(&r, i as f64 * 0.05);
            assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.25, 0.0), 0.25);
        assert!(cosine_lr(0.25, 1.0).abs() < 1e-17 && cosine_lr(0.25, 1.0) >= 0.0);
        assert!((cosine_lr(0.25, 0.5) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_zero_gradient_is_a_fixed_point() {
        let r = TrainRecipe::for_batch(768, 1.0);
        let mut p = vec![0.3, -1.0];
        let mut s = RmsState::zeros(2);
        rmsprop_step(&mut p, &[0.0, 0.0], &mut s, &r, 0.1, false).unwrap();
        assert_eq!(p, vec![0.3, -1.0]);
        assert!(rmsprop_step(&mut p, &[0.0], &mut s, &r, 0.1, false).is_err());
    }

    #[test]
    fn rmsprop_two_steps_by_hand() {
        let r = TrainRecipe::for_batch(768, 1.0);
        let (rho, mu, delta, lr, wd) = (0.953125, 0.9, 1e-3, 0.046875, 1e-5);
        let mut p = [0.5];
        let mut s = RmsState::zeros(1);
        rmsprop_step(&mut p, &[0.2], &mut s, &r, lr, true).unwrap();
        rmsprop_step(&mut p, &[-0.1], &mut s, &r, lr, true).unwrap();

        let g1 = 0.2 + wd * 0.5;
        let a1 = (1.0 - rho) * g1 * g1;
        let v1 = lr * g1 / (a1 + delta).sqrt();
        let p1 = 0.5 - v1;
        let g2 = -0.1 + wd * p1;
        let a2 = rho * a1 + (1.0 - rho) * g2 * g2;
        let v2 = mu * v1 + lr * g2 / (a2 + delta).sqrt();
        let p2 = p1 - v2;
        assert!((p[0] - p2).abs() < 1e-12);
        assert!((s.accumulator[0] - a2).abs() < 1e-12 && (s.velocity[0] - v2).abs() < 1e-12);
    }

    #[test]
    fn ema_expansion() {
        let p0 = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let p1 = Tensor::new(vec![2], vec![3.0, 5.0]).unwrap();
        let mut shadow = None;
        ema_update(&mut shadow, std::slice::from_ref(&p0), 0.97).unwrap();
        assert_eq!(shadow.as_ref().unwrap()[0], p0);
        ema_update(&mut shadow, std::slice::from_ref(&p1), 0.97).unwrap();
        let s = &shadow.unwrap()[0];
        for i in 0..2 {
            assert!((s.data()[i] - (0.97 * p0.data()[i] + 0.03 * p1.data()[i])).abs() < 1e-12);
        }
        let mut fixed = None;
        for _ in 0..5 {
            ema_update(&mut fixed, std::slice::from_ref(&p1), 0.97).unwrap();
        }
        assert_eq!(fixed.unwrap()[0], p1);
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Tensor::zeros(&[3, 7]);
        let (loss, _) = smoothed_cross_entropy(&uniform, &[0, 3, 6], 0.1).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
        assert!(smoothed_cross_entropy(&uniform, &[7, 0, 0], 0.1).is_err());

        let mut rng = Rng::new(4);
        let logits = rng.normal_tensor(&[4, 5], 2.0);
        let labels = [1, 4, 0, 2];
        let (plain, _) = smoothed_cross_entropy(&logits, &labels, 0.0).unwrap();
        let naive: f64 = labels
            .iter()
            .enumerate()
            .map(|(b, &l)| {
                let row = &logits.data()[b * 5..b * 5 + 5];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                -(row[l].exp() / z).ln()
            })
            .sum::<f64>()
            / 4.0;
        assert!((plain - naive).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = Rng::new(5);
        let logits = rng.normal_tensor(&[3, 4], 1.0);
        let labels = [0, 3, 1];
        let (_, g) = smoothed_cross_entropy(&logits, &labels, 0.1).unwrap();
        for i in 0..logits.len() {
            let mut a = logits.clone();
            let mut b = logits.clone();
            a.data_mut()[i] += 1e-6;
            b.data_mut()[i] -= 1e-6;
            let n = (smoothed_cross_entropy(&a, &labels, 0.1).unwrap().0
                - smoothed_cross_entropy(&b, &labels, 0.1).unwrap().0)
                / 2e-6;
            assert!((n - g.data()[i]).abs() < 1e-8);
        }
    }
}

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{block_boundaries, Mode, Model};
use crate::tensor::{Rng, Tensor};

use super::augment::augment_batch;
use super::checkpoint::{Checkpoint, Named};
use super::data::Dataset;
use super::recipe::*;

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("epoch,step,lr,loss,train_acc\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.epoch, r.step, r.lr, r.loss, r.train_acc).unwrap();
    }
    out
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

fn check_compatible(model: &Model, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    if data.num_classes != model.plan.num_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, model has {}",
            data.num_classes, model.plan.num_classes
        )));
    }
    model.plan.parity_profile(data.resolution() as u32).map(|_| ())
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Rows whose largest logit matches the largest target entry.
fn agreement(logits: &Tensor, targets: &Tensor) -> usize {
    (0..logits.shape()[0])
        .filter(|&b| argmax(logits.batch_row(b)) == argmax(targets.batch_row(b)))
        .count()
}

/// Accuracy of the model's evaluation-mode predictions over `data`.
pub fn accuracy(model: &Model, data: &Dataset, batch: usize) -> Result<f64> {
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = data.batch(chunk)?;
        let logits = model.logits(&x)?;
        correct += labels.iter().enumerate().filter(|&(b, &l)| argmax(logits.batch_row(b)) == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Forward and backward over `x` in micro-batches of `micro`, leaving the
/// gradient of the batch-mean loss in the model. Returns (loss, correct).
fn accumulate_gradients(model: &mut Model, x: &Tensor, targets: &Tensor, micro: usize, seed: u64) -> Result<(f64, usize)> {
    let n = x.shape()[0];
    let idx: Vec<usize> = (0..n).collect();
    model.zero_grad();
    let (mut loss, mut correct) = (0.0, 0);
    for (c, chunk) in idx.chunks(micro).enumerate() {
        let (xc, tc) = if chunk.len() == n {
            (x.clone(), targets.clone())
        } else {
            (x.select_batch(chunk)?, targets.select_batch(chunk)?)
        };
        let (logits, cache) = model.forward(&xc, Mode::Train { seed: seed.wrapping_add(c as u64) })?;
        let (l, g) = soft_cross_entropy(&logits, &tc)?;
        let share = chunk.len() as f64 / n as f64;
        model.backward(&cache, &g.scale(share))?;
        model.update_running(&cache);
        loss += share * l;
        correct += agreement(&logits, &tc);
    }
    Ok((loss, correct))
}

fn steps_for(data: &Dataset, batch: usize, epochs: f64) -> (usize, usize) {
    let per_epoch = data.len().div_ceil(batch);
    (per_epoch, (epochs * per_epoch as f64).ceil() as usize)
}

fn epoch_order(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
}

/// Gradient of the batch-mean loss for one batch, split into micro-batches
/// when the recipe asks for it. Exposed for accumulation tests.
pub fn batch_gradient(model: &mut Model, x: &Tensor, labels: &[usize], recipe: &TrainRecipe, seed: u64) -> Result<f64> {
    let targets = smoothed_targets(labels, model.plan.num_classes, recipe.label_smoothing)?;
    let micro = recipe.micro_batch.unwrap_or(labels.len());
    Ok(accumulate_gradients(model, x, &targets, micro, seed)?.0)
}

/// RMSProp training with the staircase schedule, Mixup/CutMix, label
/// smoothing and a per-epoch EMA of the weights. Runs
/// `⌈epochs · ⌈N / B⌉⌉` steps; batches are drawn from a seeded
/// permutation of the data each epoch, the last batch of an epoch may be
/// short.
pub fn train_loop(model: &mut Model, data: &Dataset, recipe: &TrainRecipe, seed: u64) -> Result<Trained> {
    recipe.validate()?;
    check_compatible(model, data)?;
    let classes = model.plan.num_classes;
    let (per_epoch, total) = steps_for(data, recipe.global_batch, recipe.epochs);
    let mut rng = Rng::new(seed);
    let mut states: Vec<RmsState> = Vec::new();
    model.visit_params(&mut |p| states.push(RmsState::zeros(p.value.len())));
    let mut shadow: Option<Vec<Tensor>> = None;
    let mut log = Vec::with_capacity(total);
    let mut order = Vec::new();
    for step in 0..total {
        let epoch = step / per_epoch;
        let within = step % per_epoch;
        if within == 0 {
            order = epoch_order(data.len(), &mut rng);
        }
        let idx = &order[within * recipe.global_batch..((within + 1) * recipe.global_batch).min(data.len())];
        let (x, labels) = data.batch(idx)?;
        let targets = smoothed_targets(&labels, classes, recipe.label_smoothing)?;
        let (x, targets, _) = augment_batch(&x, &targets, recipe.mixup_alpha, recipe.cutmix_alpha, &mut rng)?;
        let micro = recipe.micro_batch.unwrap_or(idx.len());
        let (loss, correct) = accumulate_gradients(model, &x, &targets, micro, seed ^ ((step as u64) << 16))?;

        let lr = lr_at(recipe, step as f64 / per_epoch as f64);
        let precision = model.precision;
        let mut i = 0;
        let mut failure = None;
        model.visit_params_mut(&mut |p| {
            if let Err(e) = rmsprop_step(p.value, p.grad, &mut states[i], recipe, lr, p.kind.decayed()) {
                failure.get_or_insert(e);
            }
            round_params(p.value, precision);
            i += 1;
        });
        if let Some(e) = failure {
            return Err(e);
        }
        log.push(LogRow {
            epoch,
            step,
            lr,
            loss,
            train_acc: correct as f64 / idx.len() as f64,
        });
        if within + 1 == per_epoch {
            ema_update(&mut shadow, &tensors(&model.snapshot()), recipe.ema_decay)?;
        }
    }
    let params = model.snapshot();
    let shadow = shadow.unwrap_or_else(|| tensors(&params));
    let state = |f: fn(&RmsState) -> &Vec<f64>| -> Result<Named> {
        params
            .iter()
            .zip(&states)
            .map(|((n, t), s)| Ok((n.clone(), Tensor::new(t.shape().to_vec(), f(s).clone())?)))
            .collect()
    };
    let checkpoint = Checkpoint {
        config: model.config.clone(),
        accumulator: state(|s| &s.accumulator)?,
        velocity: state(|s| &s.velocity)?,
        ema: Some(params.iter().map(|(n, _)| n.clone()).zip(shadow).collect()),
        running: model.running_stats(),
        epoch: total.div_ceil(per_epoch),
        step: total,
        recipe: recipe.fingerprint(),
        params,
    };
    Ok(Trained { checkpoint, log })
}

fn tensors(named: &Named) -> Vec<Tensor> {
    named.iter().map(|(_, t)| t.clone()).collect()
}

/// Plain SGD with a cosine schedule on the parameters in `recipe.scope`,
/// starting from the checkpoint's averaged weights. No augmentation.
pub fn finetune(model: &mut Model, checkpoint: &Checkpoint, recipe: &FinetuneRecipe, data: &Dataset, seed: u64) -> Result<Trained> {
    recipe.validate()?;
    if checkpoint.config != model.config {
        return Err(Error::invalid("checkpoint was produced by a different model configuration"));
    }
    check_compatible(model, data)?;
    model.load_snapshot(checkpoint.averaged())?;
    model.load_running_stats(&checkpoint.running)?;
    let scope = block_boundaries(model).scope(recipe.scope).clone();
    let (per_epoch, total) = steps_for(data, recipe.batch, recipe.epochs);
    let mut rng = Rng::new(seed);
    let mut order = Vec::new();
    let mut log = Vec::with_capacity(total);
    for step in 0..total {
        let within = step % per_epoch;
        if within == 0 {
            order = epoch_order(data.len(), &mut rng);
        }
        let idx = &order[within * recipe.batch..((within + 1) * recipe.batch).min(data.len())];
        let (x, labels) = data.batch(idx)?;
        let targets = smoothed_targets(&labels, data.num_classes, recipe.label_smoothing)?;
        let (loss, correct) = accumulate_gradients(model, &x, &targets, idx.len(), seed ^ ((step as u64) << 16))?;
        let lr = cosine_lr(recipe.initial_lr, step as f64 / total as f64);
        let precision = model.precision;
        model.visit_params_mut(&mut |p| {
            if scope.contains(&p.name) {
                for (v, g) in p.value.iter_mut().zip(p.grad.iter()) {
                    *v -= lr * g;
                }
                round_params(p.value, precision);
            }
        });
        log.push(LogRow {
            epoch: step / per_epoch,
            step,
            lr,
            loss,
            train_acc: correct as f64 / idx.len() as f64,
        });
    }
    let recipe_json = serde_json::to_string(recipe)?;
    Ok(Trained {
        checkpoint: Checkpoint {
            config: model.config.clone(),
            params: model.snapshot(),
            accumulator: vec![],
            velocity: vec![],
            ema: None,
            running: model.running_stats(),
            epoch: checkpoint.epoch + total.div_ceil(per_epoch),
            step: checkpoint.step + total,
            recipe: recipe_json,
        },
        log,
    })
}

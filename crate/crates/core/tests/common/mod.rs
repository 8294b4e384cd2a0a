//! Finite-difference gradient checks and random layer instances shared by
//! the integration tests.

#![allow(dead_code)]

use effnet::activation::Activation;
use effnet::conv::{conv_backward, conv_forward, ConvCache, ConvSpec, ConvWeights, Padding};
use effnet::model::{build_model, Dense, Mode, ModelConfig, SqueezeExcite};
use effnet::norm::{NormLayer, NormMethod};
use effnet::tensor::{Rng, Tensor};

pub const STEP: f64 = 1e-5;
/// Gradient norms below this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

/// `‖a − n‖ / max(‖a‖, ‖n‖, REL_FLOOR)` over a whole gradient.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(REL_FLOOR)
}

/// Central differences; `loss(i, d)` evaluates the loss with entry `i`
/// shifted by `d`.
pub fn numeric_gradient(n: usize, mut loss: impl FnMut(usize, f64) -> f64) -> Vec<f64> {
    (0..n).map(|i| (loss(i, STEP) - loss(i, -STEP)) / (2.0 * STEP)).collect()
}

fn perturbed(t: &Tensor, i: usize, d: f64) -> Tensor {
    let mut t = t.clone();
    t.data_mut()[i] += d;
    t
}

fn perturbed_vec(v: &[f64], i: usize, d: f64) -> Vec<f64> {
    let mut v = v.to_vec();
    v[i] += d;
    v
}

/// Largest relative error among the gradients of one instance.
pub struct Check {
    pub label: String,
    pub error: f64,
}

fn worst(label: String, errors: impl IntoIterator<Item = f64>) -> Check {
    Check {
        label,
        error: errors.into_iter().fold(0.0, f64::max),
    }
}

pub fn random_conv_spec(rng: &mut Rng, kind: ConvKind) -> ConvSpec {
    let g = match kind {
        ConvKind::Depthwise => 1,
        ConvKind::Grouped => 2 + rng.below(3),
        ConvKind::Dense => 0,
    };
    let groups = 1 + rng.below(3);
    let (in_c, gs) = if g == 0 {
        let c = 1 + rng.below(5);
        (c, c)
    } else {
        (g * groups, g)
    };
    let out_per_group = 1 + rng.below(2);
    let out_c = out_per_group * in_c / gs;
    let k = 1 + rng.below(3);
    let s = 1 + rng.below(2);
    let f = 3 + rng.below(4);
    let b = 1 + rng.below(2);
    ConvSpec::grouped(in_c, out_c, gs, k, s, Padding::Same)
        .unwrap()
        .with_input(b, f)
}

#[derive(Debug, Clone, Copy)]
pub enum ConvKind {
    Depthwise,
    Grouped,
    Dense,
}

pub fn check_conv(seed: u64, kind: ConvKind) -> Check {
    let mut rng = Rng::new(seed);
    let spec = random_conv_spec(&mut rng, kind);
    let x = rng.normal_tensor(&[spec.batch, spec.in_channels, spec.field, spec.field], 1.0);
    let w = ConvWeights::new(&spec, rng.normal_tensor(&spec.weight_shape(), 1.0)).unwrap();
    let out = conv_forward(&x, &w, &spec).unwrap();
    let r = rng.normal_tensor(out.shape(), 1.0);
    let cache = ConvCache {
        input: x.clone(),
        spec,
    };
    let (gx, gw) = conv_backward(&r, &cache, &w).unwrap();
    let loss = |x: &Tensor, w: &ConvWeights| conv_forward(x, w, &spec).unwrap().dot(&r).unwrap();
    let nx = numeric_gradient(x.len(), |i, d| loss(&perturbed(&x, i, d), &w));
    let nw = numeric_gradient(w.weight.len(), |i, d| {
        loss(&x, &ConvWeights::new(&spec, perturbed(&w.weight, i, d)).unwrap())
    });
    worst(
        format!("{kind:?} conv {spec:?}"),
        [relative_error(gx.data(), &nx), relative_error(gw.data(), &nw)],
    )
}

pub fn random_norm_layer(rng: &mut Rng, method: NormMethod, activation: Activation, proxy: bool) -> NormLayer {
    let c = match method {
        NormMethod::Group(g) => g * (1 + rng.below(3)),
        _ => 1 + rng.below(4),
    };
    let mut layer = NormLayer::new(method, c, activation, proxy).unwrap();
    for v in &mut layer.spec.gamma {
        *v = rng.uniform(0.5, 1.5);
    }
    for v in &mut layer.spec.beta {
        *v = rng.uniform(-0.5, 0.5);
    }
    if let Some(p) = &mut layer.proxy {
        for v in p.beta_tilde.iter_mut().chain(p.gamma_tilde.iter_mut()) {
            *v = rng.uniform(-0.3, 0.3);
        }
    }
    layer
}

pub fn check_norm(seed: u64, method: NormMethod, activation: Activation, proxy: bool) -> Check {
    let mut rng = Rng::new(seed);
    let layer = random_norm_layer(&mut rng, method, activation, proxy);
    let c = layer.channels();
    let b = 2 + rng.below(2);
    let f = 2 + rng.below(3);
    let x = rng.normal_tensor(&[b, c, f, f], 1.0).map(|v| 0.3 + 1.7 * v);
    let (z, cache) = layer.forward(&x, true).unwrap();
    let r = rng.normal_tensor(z.shape(), 1.0);
    let g = layer.backward(&cache, &r).unwrap();
    let loss = |l: &NormLayer, x: &Tensor| l.forward(x, true).unwrap().0.dot(&r).unwrap();

    let mut errors = vec![relative_error(g.x.data(), &numeric_gradient(x.len(), |i, d| loss(&layer, &perturbed(&x, i, d))))];
    let ng = numeric_gradient(c, |i, d| {
        let mut l = layer.clone();
        l.spec.gamma = perturbed_vec(&l.spec.gamma, i, d);
        loss(&l, &x)
    });
    errors.push(relative_error(&g.gamma, &ng));
    let nb = numeric_gradient(c, |i, d| {
        let mut l = layer.clone();
        l.spec.beta = perturbed_vec(&l.spec.beta, i, d);
        loss(&l, &x)
    });
    errors.push(relative_error(&g.beta, &nb));
    if proxy {
        let nbt = numeric_gradient(c, |i, d| {
            let mut l = layer.clone();
            let p = l.proxy.as_mut().unwrap();
            p.beta_tilde = perturbed_vec(&p.beta_tilde, i, d);
            loss(&l, &x)
        });
        errors.push(relative_error(&g.beta_tilde, &nbt));
        let ngt = numeric_gradient(c, |i, d| {
            let mut l = layer.clone();
            let p = l.proxy.as_mut().unwrap();
            p.gamma_tilde = perturbed_vec(&p.gamma_tilde, i, d);
            loss(&l, &x)
        });
        errors.push(relative_error(&g.gamma_tilde, &ngt));
    }
    worst(format!("{method} {activation} proxy={proxy} c={c} b={b} f={f}"), errors)
}

pub fn check_se(seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let c = 2 + rng.below(4);
    let red = 1 + rng.below(2);
    let mut se = SqueezeExcite::new(c, red, Activation::Swish, &mut rng);
    for v in se.reduce.bias.iter_mut().chain(se.expand.bias.iter_mut()) {
        *v = rng.uniform(-0.5, 0.5);
    }
    let b = 1 + rng.below(2);
    let f = 2 + rng.below(3);
    let x = rng.normal_tensor(&[b, c, f, f], 1.0);
    let (y, cache) = se.forward(&x).unwrap();
    let r = rng.normal_tensor(y.shape(), 1.0);
    let mut trained = se.clone();
    let gx = trained.backward(&cache, &r).unwrap();
    let loss = |s: &SqueezeExcite, x: &Tensor| s.forward(x).unwrap().0.dot(&r).unwrap();

    let mut errors = vec![relative_error(gx.data(), &numeric_gradient(x.len(), |i, d| loss(&se, &perturbed(&x, i, d))))];
    type Pick = fn(&mut SqueezeExcite) -> &mut [f64];
    let picks: [(Pick, Vec<f64>); 4] = [
        (|s| s.reduce.weight.data_mut(), trained.reduce.grad_weight.data().to_vec()),
        (|s| &mut s.reduce.bias, trained.reduce.grad_bias.clone()),
        (|s| s.expand.weight.data_mut(), trained.expand.grad_weight.data().to_vec()),
        (|s| &mut s.expand.bias, trained.expand.grad_bias.clone()),
    ];
    for (pick, analytic) in picks {
        let n = numeric_gradient(analytic.len(), |i, d| {
            let mut s = se.clone();
            pick(&mut s)[i] += d;
            loss(&s, &x)
        });
        errors.push(relative_error(&analytic, &n));
    }
    worst(format!("se c={c} r={red} b={b} f={f}"), errors)
}

pub fn check_dense(seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let (k, m, b) = (1 + rng.below(6), 1 + rng.below(5), 1 + rng.below(3));
    let dense = Dense::from_parts(rng.normal_tensor(&[m, k], 1.0), (0..m).map(|_| rng.normal()).collect());
    let x = rng.normal_tensor(&[b, k], 1.0);
    let r = rng.normal_tensor(&[b, m], 1.0);
    let mut trained = dense.clone();
    let gx = trained.backward(&x, &r).unwrap();
    let loss = |l: &Dense, x: &Tensor| l.forward(x).unwrap().dot(&r).unwrap();
    let nx = numeric_gradient(x.len(), |i, d| loss(&dense, &perturbed(&x, i, d)));
    let nw = numeric_gradient(dense.weight.len(), |i, d| {
        loss(&Dense::from_parts(perturbed(&dense.weight, i, d), dense.bias.clone()), &x)
    });
    let nb = numeric_gradient(m, |i, d| {
        loss(&Dense::from_parts(dense.weight.clone(), perturbed_vec(&dense.bias, i, d)), &x)
    });
    worst(
        format!("dense {k}->{m} b={b}"),
        [
            relative_error(gx.data(), &nx),
            relative_error(trained.grad_weight.data(), &nw),
            relative_error(&trained.grad_bias, &nb),
        ],
    )
}

/// End-to-end check on the tiny model: every input entry of one sample and
/// `samples` randomly chosen parameter scalars.
pub fn check_model(config: &ModelConfig, seed: u64, samples: usize) -> Check {
    let mut rng = Rng::new(seed);
    let mut model = build_model(config, seed).unwrap();
    // move norm parameters off their initial values
    model.visit_params_mut(&mut |p| {
        if !matches!(p.kind, effnet::model::ParamKind::ConvWeight | effnet::model::ParamKind::DenseWeight) {
            for v in p.value.iter_mut() {
                *v += 0.2 * (2.0 * ((v.to_bits() % 1000) as f64 / 1000.0) - 1.0);
            }
        }
    });
    let x = rng.normal_tensor(&[2, 3, 32, 32], 1.0);
    let mode = Mode::Train { seed: 0 };
    let (logits, cache) = model.forward(&x, mode).unwrap();
    let r = rng.normal_tensor(logits.shape(), 1.0);
    let gx = model.backward(&cache, &r).unwrap();
    let loss = |m: &effnet::model::Model, x: &Tensor| m.forward(x, mode).unwrap().0.dot(&r).unwrap();

    let total = model.param_count();
    let mut picks: Vec<usize> = (0..samples).map(|_| rng.below(total)).collect();
    picks.sort_unstable();
    picks.dedup();
    let mut analytic = Vec::new();
    let mut flat = Vec::new();
    model.visit_params(&mut |p| flat.extend_from_slice(p.grad));
    for &i in &picks {
        analytic.push(flat[i]);
    }
    let numeric = numeric_gradient(picks.len(), |j, d| {
        let mut m = model.clone();
        let mut offset = 0;
        let target = picks[j];
        m.visit_params_mut(&mut |p| {
            if target >= offset && target < offset + p.value.len() {
                p.value[target - offset] += d;
            }
            offset += p.value.len();
        });
        loss(&m, &x)
    });
    let xs: Vec<usize> = (0..samples).map(|_| rng.below(x.len())).collect();
    let nx = numeric_gradient(xs.len(), |j, d| loss(&model, &perturbed(&x, xs[j], d)));
    let ax: Vec<f64> = xs.iter().map(|&i| gx.data()[i]).collect();
    worst(
        format!("tiny model {} proxy={}", config.norm.method, config.norm.proxy),
        [relative_error(&analytic, &numeric), relative_error(&ax, &nx)],
    )
}

/// Batch rearrangements applied to a batch of four: a permutation,
/// duplication and two subsets.
pub const REARRANGEMENTS: [&[usize]; 4] = [&[2, 0, 3, 1], &[1, 1, 3, 0, 3], &[2], &[3, 0]];

fn rows_identical(a: &Tensor, ai: usize, b: &Tensor, bi: usize) -> bool {
    let (x, y) = (a.batch_row(ai), b.batch_row(bi));
    x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
}

/// Runs `f` (output and input gradient for a batch and its upstream
/// gradient) on the full batch and on every rearrangement, and reports
/// whether each sample's rows are bit-identical throughout.
pub fn per_sample_bit_identical(x: &Tensor, r: &Tensor, f: impl Fn(&Tensor, &Tensor) -> (Tensor, Tensor)) -> bool {
    let (z, g) = f(x, r);
    REARRANGEMENTS.iter().all(|idx| {
        let (z2, g2) = f(&x.select_batch(idx).unwrap(), &r.select_batch(idx).unwrap());
        idx.iter()
            .enumerate()
            .all(|(j, &i)| rows_identical(&z2, j, &z, i) && rows_identical(&g2, j, &g, i))
    })
}

pub fn norm_batch_independent(seed: u64, method: NormMethod, activation: Activation, proxy: bool) -> bool {
    let mut rng = Rng::new(seed);
    let layer = random_norm_layer(&mut rng, method, activation, proxy);
    let x = rng.normal_tensor(&[4, layer.channels(), 3, 3], 2.0);
    let r = rng.normal_tensor(x.shape(), 1.0);
    per_sample_bit_identical(&x, &r, |x, r| {
        let (z, cache) = layer.forward(x, true).unwrap();
        (z, layer.backward(&cache, r).unwrap().x)
    })
}

pub fn model_batch_independent(config: &ModelConfig, seed: u64) -> bool {
    let model = build_model(config, seed).unwrap();
    let mut rng = Rng::new(seed + 1);
    let x = rng.normal_tensor(&[4, 3, 32, 32], 1.0);
    let r = rng.normal_tensor(&[4, config.num_classes], 1.0);
    per_sample_bit_identical(&x, &r, |x, r| {
        let mut m = model.clone();
        let (logits, cache) = m.forward(x, Mode::Train { seed: 0 }).unwrap();
        (logits, m.backward(&cache, r).unwrap())
    })
}

/// Mean and variance of `relu(u)` for `u ~ N(mu, sigma²)`.
pub fn rectified_gaussian_moments(mu: f64, sigma: f64) -> (f64, f64) {
    use statrs::distribution::{Continuous, ContinuousCDF, Normal};
    let n = Normal::new(0.0, 1.0).unwrap();
    let a = mu / sigma;
    let (cdf, pdf) = (n.cdf(a), n.pdf(a));
    let m1 = mu * cdf + sigma * pdf;
    let m2 = (mu * mu + sigma * sigma) * cdf + mu * sigma * pdf;
    (m1, m2 - m1 * m1)
}

/// Mean and variance of `f(ξ)`, `ξ ~ N(0, 1)`, from `samples` stratified
/// draws: one uniform per equal-probability stratum, mapped through Φ⁻¹.
pub fn stratified_normal_moments(f: impl Fn(f64) -> f64, samples: usize, seed: u64) -> (f64, f64) {
    use statrs::distribution::{ContinuousCDF, Normal};
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut rng = Rng::new(seed);
    let shift = f(0.0);
    let (mut s1, mut s2) = (0.0, 0.0);
    for i in 0..samples {
        let u = (i as f64 + rng.uniform(0.0, 1.0)) / samples as f64;
        let v = f(n.inverse_cdf(u)) - shift;
        s1 += v;
        s2 += v * v;
    }
    let m = s1 / samples as f64;
    (m + shift, s2 / samples as f64 - m * m)
}

pub mod training {
    use effnet::model::{build_model, Model, ModelConfig};
    use effnet::norm::NormMethod;
    use effnet::train::{accuracy, synthetic_blobs, train_loop, Dataset, Trained, TrainRecipe};

    pub const SMOKE_SAMPLES: usize = 128;
    pub const SMOKE_BATCH: usize = 16;
    pub const SMOKE_STEPS: usize = 200;
    pub const SMOKE_ACCURACY: f64 = 0.9;

    pub fn smoke_config(group_size: usize) -> ModelConfig {
        ModelConfig::tiny(group_size, 4, 2).with_norm(NormMethod::Layer, true)
    }

    pub fn smoke_data() -> Dataset {
        synthetic_blobs(SMOKE_SAMPLES, 32, 7).unwrap()
    }

    /// The unmodified recipe at a desk-scale batch, run for a fixed number of
    /// steps.
    pub fn recipe(batch: usize, samples: usize, steps: usize) -> TrainRecipe {
        TrainRecipe::for_batch(batch, steps as f64 / samples.div_ceil(batch) as f64)
    }

    /// Trains the smoke model and returns it with its run and final
    /// evaluation-mode training accuracy.
    pub fn smoke_run(group_size: usize) -> (Model, Trained, f64) {
        let data = smoke_data();
        let mut model = build_model(&smoke_config(group_size), 1).unwrap();
        let run = train_loop(&mut model, &data, &recipe(SMOKE_BATCH, SMOKE_SAMPLES, SMOKE_STEPS), 3).unwrap();
        assert_eq!(run.log.len(), SMOKE_STEPS);
        let acc = accuracy(&model, &data, 64).unwrap();
        (model, run, acc)
    }
}

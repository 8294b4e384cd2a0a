//! Self-checks run by `effnet verify`: finite-difference gradients, batch
//! independence, proxy-moment accuracy and the published cost and
//! resolution tables.

use std::fmt;

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::activation::Activation;
use crate::conv::{conv_backward, conv_forward, ConvCache, ConvSpec, ConvWeights, Padding};
use crate::error::Result;
use crate::model::{build_model, count_cost, Dense, Mode, Model, ModelConfig, ModelSize, ParamKind, SqueezeExcite};
use crate::norm::{channel_proxy_moments, NormLayer, NormMethod, QuadratureRule};
use crate::resolution::{half_resolution, EFFICIENTNET_DOWNSAMPLES};
use crate::tensor::{Rng, Tensor};

pub const GRADIENT_TOLERANCE: f64 = 1e-6;
pub const MODEL_GRADIENT_TOLERANCE: f64 = 1e-5;
pub const MOMENT_TOLERANCE: f64 = 1e-4;
pub const COST_TOLERANCE: f64 = 0.05;
const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-3;

/// Published parameter (millions) and FLOP (billions) counts at native
/// resolution with group normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedCost {
    pub size: ModelSize,
    pub group_size: usize,
    pub expansion: usize,
    pub params_m: f64,
    pub flops_b: f64,
}

const fn row(size: ModelSize, group_size: usize, expansion: usize, params_m: f64, flops_b: f64) -> PublishedCost {
    PublishedCost {
        size,
        group_size,
        expansion,
        params_m,
        flops_b,
    }
}

pub const PUBLISHED_COSTS: [PublishedCost; 18] = [
    row(ModelSize::B0, 1, 6, 5.3, 0.4),
    row(ModelSize::B0, 4, 5, 5.1, 0.4),
    row(ModelSize::B0, 16, 4, 5.9, 0.6),
    row(ModelSize::B0, 32, 3, 6.2, 0.9),
    row(ModelSize::B0, 64, 2, 6.7, 1.5),
    row(ModelSize::B1, 1, 6, 7.8, 0.7),
    row(ModelSize::B1, 16, 4, 8.3, 1.1),
    row(ModelSize::B2, 1, 6, 9.1, 1.0),
    row(ModelSize::B2, 4, 5, 8.6, 1.0),
    row(ModelSize::B2, 16, 4, 9.5, 1.5),
    row(ModelSize::B2, 32, 3, 10.3, 2.1),
    row(ModelSize::B2, 64, 2, 9.9, 3.6),
    row(ModelSize::B3, 1, 6, 12.2, 1.8),
    row(ModelSize::B3, 16, 4, 12.6, 2.7),
    row(ModelSize::B4, 1, 6, 19.3, 4.4),
    row(ModelSize::B4, 16, 4, 19.3, 6.2),
    row(ModelSize::B5, 1, 6, 30.4, 10.2),
    row(ModelSize::B5, 16, 4, 28.7, 13.4),
];

/// Published (native, half) training resolutions for B0..B5.
pub const PUBLISHED_RESOLUTIONS: [(u32, u32); 6] = [(224, 160), (240, 176), (260, 192), (300, 204), (380, 252), (456, 328)];

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Random instances per layer type in the gradient and
    /// batch-independence suites.
    pub instances: usize,
    /// Stratified samples per swish Monte-Carlo estimate.
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            instances: 20,
            mc_samples: 10_000_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: usize,
    pub failures: Vec<String>,
    /// One-line summary such as the largest error seen.
    pub detail: String,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{status} {} ({} checks; {})", self.name, self.checks, self.detail)?;
        for failure in &self.failures {
            write!(f, "\n    {failure}")?;
        }
        Ok(())
    }
}

pub fn run_all(opts: &VerifyOptions) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        gradient_suite(opts)?,
        batch_independence_suite(opts)?,
        proxy_moment_suite(opts)?,
        resolution_table_suite()?,
        cost_table_suite()?,
    ])
}

struct Tally {
    name: &'static str,
    checks: usize,
    worst: f64,
    failures: Vec<String>,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Tally {
            name,
            checks: 0,
            worst: 0.0,
            failures: vec![],
        }
    }

    fn error(&mut self, label: impl FnOnce() -> String, error: f64, tolerance: f64) {
        self.checks += 1;
        self.worst = self.worst.max(error);
        if !(error <= tolerance) {
            self.failures.push(format!("{}: {error:.3e} > {tolerance:e}", label()));
        }
    }

    fn holds(&mut self, label: impl FnOnce() -> String, ok: bool) {
        self.checks += 1;
        if !ok {
            self.failures.push(label());
        }
    }

    fn report(self, detail: String) -> SuiteReport {
        SuiteReport {
            name: self.name,
            checks: self.checks,
            failures: self.failures,
            detail,
        }
    }
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    diff / norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied())).max(FD_FLOOR)
}

fn central(n: usize, mut loss: impl FnMut(usize, f64) -> f64) -> Vec<f64> {
    (0..n).map(|i| (loss(i, FD_STEP) - loss(i, -FD_STEP)) / (2.0 * FD_STEP)).collect()
}

fn nudged(t: &Tensor, i: usize, d: f64) -> Tensor {
    let mut t = t.clone();
    t.data_mut()[i] += d;
    t
}

fn conv_error(rng: &mut Rng, group: Option<usize>) -> Result<f64> {
    let groups = 1 + rng.below(3);
    let (in_c, gs) = match group {
        Some(g) => (g * groups, g),
        None => {
            let c = 1 + rng.below(5);
            (c, c)
        }
    };
    let out_c = (1 + rng.below(2)) * in_c / gs;
    let spec = ConvSpec::grouped(in_c, out_c, gs, 1 + rng.below(3), 1 + rng.below(2), Padding::Same)?
        .with_input(1 + rng.below(2), 3 + rng.below(4));
    let x = rng.normal_tensor(&[spec.batch, spec.in_channels, spec.field, spec.field], 1.0);
    let w = ConvWeights::new(&spec, rng.normal_tensor(&spec.weight_shape(), 1.0))?;
    let r = rng.normal_tensor(conv_forward(&x, &w, &spec)?.shape(), 1.0);
    let cache = ConvCache { input: x.clone(), spec };
    let (gx, gw) = conv_backward(&r, &cache, &w)?;
    let loss = |x: &Tensor, w: &ConvWeights| conv_forward(x, w, &spec).and_then(|y| y.dot(&r)).unwrap_or(f64::NAN);
    let nx = central(x.len(), |i, d| loss(&nudged(&x, i, d), &w));
    let nw = central(w.weight.len(), |i, d| {
        ConvWeights::new(&spec, nudged(&w.weight, i, d)).map_or(f64::NAN, |w| loss(&x, &w))
    });
    Ok(relative_error(gx.data(), &nx).max(relative_error(gw.data(), &nw)))
}

fn norm_error(rng: &mut Rng, method: NormMethod, activation: Activation, proxy: bool) -> Result<f64> {
    let c = match method {
        NormMethod::Group(g) => g * (1 + rng.below(3)),
        _ => 1 + rng.below(4),
    };
    let mut layer = NormLayer::new(method, c, activation, proxy)?;
    layer.spec.gamma.iter_mut().for_each(|v| *v = rng.uniform(0.5, 1.5));
    layer.spec.beta.iter_mut().for_each(|v| *v = rng.uniform(-0.5, 0.5));
    if let Some(p) = &mut layer.proxy {
        for v in p.beta_tilde.iter_mut().chain(p.gamma_tilde.iter_mut()) {
            *v = rng.uniform(-0.3, 0.3);
        }
    }
    let (b, f) = (2 + rng.below(2), 2 + rng.below(3));
    let x = rng.normal_tensor(&[b, c, f, 2], 1.7).map(|v| v + 0.3);
    let (z, cache) = layer.forward(&x, true)?;
    let r = rng.normal_tensor(z.shape(), 1.0);
    let g = layer.backward(&cache, &r)?;
    let loss = |l: &NormLayer, x: &Tensor| l.forward(x, true).and_then(|(z, _)| z.dot(&r)).unwrap_or(f64::NAN);
    let mut worst = relative_error(g.x.data(), &central(x.len(), |i, d| loss(&layer, &nudged(&x, i, d))));
    type Pick = fn(&mut NormLayer) -> &mut Vec<f64>;
    let mut picks: Vec<(Pick, &[f64])> = vec![(|l| &mut l.spec.gamma, &g.gamma), (|l| &mut l.spec.beta, &g.beta)];
    if proxy {
        picks.push((|l| &mut l.proxy.as_mut().unwrap().beta_tilde, &g.beta_tilde));
        picks.push((|l| &mut l.proxy.as_mut().unwrap().gamma_tilde, &g.gamma_tilde));
    }
    for (pick, analytic) in picks {
        let numeric = central(c, |i, d| {
            let mut l = layer.clone();
            pick(&mut l)[i] += d;
            loss(&l, &x)
        });
        worst = worst.max(relative_error(analytic, &numeric));
    }
    Ok(worst)
}

fn se_error(rng: &mut Rng) -> Result<f64> {
    let c = 2 + rng.below(4);
    let mut se = SqueezeExcite::new(c, 1 + rng.below(2), Activation::Swish, rng);
    for v in se.reduce.bias.iter_mut().chain(se.expand.bias.iter_mut()) {
        *v = rng.uniform(-0.5, 0.5);
    }
    let (b, f) = (1 + rng.below(2), 2 + rng.below(3));
    let x = rng.normal_tensor(&[b, c, f, 3], 1.0);
    let (y, cache) = se.forward(&x)?;
    let r = rng.normal_tensor(y.shape(), 1.0);
    let mut grads = se.clone();
    let gx = grads.backward(&cache, &r)?;
    let loss = |s: &SqueezeExcite, x: &Tensor| s.forward(x).and_then(|(y, _)| y.dot(&r)).unwrap_or(f64::NAN);
    let mut worst = relative_error(gx.data(), &central(x.len(), |i, d| loss(&se, &nudged(&x, i, d))));
    type Pick = fn(&mut SqueezeExcite) -> &mut [f64];
    let picks: [(Pick, Vec<f64>); 4] = [
        (|s| s.reduce.weight.data_mut(), grads.reduce.grad_weight.data().to_vec()),
        (|s| &mut s.reduce.bias, grads.reduce.grad_bias.clone()),
        (|s| s.expand.weight.data_mut(), grads.expand.grad_weight.data().to_vec()),
        (|s| &mut s.expand.bias, grads.expand.grad_bias.clone()),
    ];
    for (pick, analytic) in picks {
        let numeric = central(analytic.len(), |i, d| {
            let mut s = se.clone();
            pick(&mut s)[i] += d;
            loss(&s, &x)
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn dense_error(rng: &mut Rng) -> Result<f64> {
    let (k, m, b) = (1 + rng.below(6), 1 + rng.below(5), 1 + rng.below(3));
    let dense = Dense::from_parts(rng.normal_tensor(&[m, k], 1.0), (0..m).map(|_| rng.normal()).collect());
    let x = rng.normal_tensor(&[b, k], 1.0);
    let r = rng.normal_tensor(&[b, m], 1.0);
    let mut grads = dense.clone();
    let gx = grads.backward(&x, &r)?;
    let loss = |l: &Dense, x: &Tensor| l.forward(x).and_then(|y| y.dot(&r)).unwrap_or(f64::NAN);
    let nx = central(x.len(), |i, d| loss(&dense, &nudged(&x, i, d)));
    let nw = central(dense.weight.len(), |i, d| {
        loss(&Dense::from_parts(nudged(&dense.weight, i, d), dense.bias.clone()), &x)
    });
    let nb = central(m, |i, d| {
        let mut bias = dense.bias.clone();
        bias[i] += d;
        loss(&Dense::from_parts(dense.weight.clone(), bias), &x)
    });
    Ok(relative_error(gx.data(), &nx)
        .max(relative_error(grads.grad_weight.data(), &nw))
        .max(relative_error(&grads.grad_bias, &nb)))
}

fn model_error(config: &ModelConfig, seed: u64, samples: usize) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut model = build_model(config, seed)?;
    model.visit_params_mut(&mut |p| {
        if !matches!(p.kind, ParamKind::ConvWeight | ParamKind::DenseWeight) {
            p.value.iter_mut().for_each(|v| *v += rng.uniform(-0.2, 0.2));
        }
    });
    let x = rng.normal_tensor(&[2, 3, 32, 32], 1.0);
    let mode = Mode::Train { seed: 0 };
    let (logits, cache) = model.forward(&x, mode)?;
    let r = rng.normal_tensor(logits.shape(), 1.0);
    let gx = model.backward(&cache, &r)?;
    let loss = |m: &Model, x: &Tensor| m.forward(x, mode).and_then(|(y, _)| y.dot(&r)).unwrap_or(f64::NAN);
    let mut flat = Vec::new();
    model.visit_params(&mut |p| flat.extend_from_slice(p.grad));
    let picks: Vec<usize> = (0..samples).map(|_| rng.below(flat.len())).collect();
    let analytic: Vec<f64> = picks.iter().map(|&i| flat[i]).collect();
    let numeric = central(picks.len(), |j, d| {
        let mut m = model.clone();
        let mut offset = 0;
        m.visit_params_mut(&mut |p| {
            if (offset..offset + p.value.len()).contains(&picks[j]) {
                p.value[picks[j] - offset] += d;
            }
            offset += p.value.len();
        });
        loss(&m, &x)
    });
    let xs: Vec<usize> = (0..samples).map(|_| rng.below(x.len())).collect();
    let nx = central(xs.len(), |j, d| loss(&model, &nudged(&x, xs[j], d)));
    let ax: Vec<f64> = xs.iter().map(|&i| gx.data()[i]).collect();
    Ok(relative_error(&analytic, &numeric).max(relative_error(&ax, &nx)))
}

const BATCH_FREE: [NormMethod; 3] = [NormMethod::Layer, NormMethod::Group(2), NormMethod::Instance];

pub fn gradient_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut t = Tally::new("gradients");
    let mut rng = Rng::new(opts.seed);
    for i in 0..opts.instances {
        for (label, group) in [("depthwise conv", Some(1)), ("grouped conv", Some(2 + i % 3)), ("dense conv", None)] {
            t.error(|| format!("{label} #{i}"), conv_error(&mut rng, group)?, GRADIENT_TOLERANCE);
        }
        for method in [NormMethod::Batch, NormMethod::Layer, NormMethod::Group(2), NormMethod::Instance] {
            let e = norm_error(&mut rng, method, Activation::Swish, false)?;
            t.error(|| format!("{method} #{i}"), e, GRADIENT_TOLERANCE);
        }
        for method in BATCH_FREE {
            for act in [Activation::Swish, Activation::Relu] {
                let e = norm_error(&mut rng, method, act, true)?;
                t.error(|| format!("{method}+PN {act} #{i}"), e, GRADIENT_TOLERANCE);
            }
        }
        t.error(|| format!("squeeze-excite #{i}"), se_error(&mut rng)?, GRADIENT_TOLERANCE);
        t.error(|| format!("classifier #{i}"), dense_error(&mut rng)?, GRADIENT_TOLERANCE);
    }
    for (k, cfg) in [
        ModelConfig::tiny(4, 4, 3),
        ModelConfig::tiny(1, 4, 3).with_norm(NormMethod::Layer, true),
    ]
    .iter()
    .enumerate()
    {
        let e = model_error(cfg, opts.seed + k as u64, 24)?;
        t.error(|| format!("tiny model {}", cfg.norm.method), e, MODEL_GRADIENT_TOLERANCE);
    }
    let detail = format!("max relative error {:.2e}", t.worst);
    Ok(t.report(detail))
}

/// Whether every sample's output and input gradient rows are bit-identical
/// when the batch is permuted, duplicated or subset.
fn rows_stable(x: &Tensor, r: &Tensor, f: impl Fn(&Tensor, &Tensor) -> Result<(Tensor, Tensor)>) -> Result<bool> {
    const REARRANGEMENTS: [&[usize]; 4] = [&[2, 0, 3, 1], &[1, 1, 3, 0, 3], &[2], &[3, 0]];
    let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| p.to_bits() == q.to_bits());
    let (z, g) = f(x, r)?;
    for idx in REARRANGEMENTS {
        let (z2, g2) = f(&x.select_batch(idx)?, &r.select_batch(idx)?)?;
        for (j, &i) in idx.iter().enumerate() {
            if !same(z2.batch_row(j), z.batch_row(i)) || !same(g2.batch_row(j), g.batch_row(i)) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn layer_stable(rng: &mut Rng, method: NormMethod, activation: Activation, proxy: bool) -> Result<bool> {
    let c = if let NormMethod::Group(g) = method { 2 * g } else { 3 };
    let mut layer = NormLayer::new(method, c, activation, proxy)?;
    layer.spec.gamma.iter_mut().for_each(|v| *v = rng.uniform(0.5, 1.5));
    let x = rng.normal_tensor(&[4, c, 3, 3], 2.0);
    let r = rng.normal_tensor(x.shape(), 1.0);
    rows_stable(&x, &r, |x, r| {
        let (z, cache) = layer.forward(x, true)?;
        Ok((z, layer.backward(&cache, r)?.x))
    })
}

pub fn batch_independence_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut t = Tally::new("batch independence");
    let mut rng = Rng::new(opts.seed.wrapping_add(1));
    for i in 0..opts.instances {
        for method in BATCH_FREE {
            for (act, proxy) in [(Activation::Swish, false), (Activation::Swish, true), (Activation::Relu, true)] {
                let ok = layer_stable(&mut rng, method, act, proxy)?;
                t.holds(|| format!("{method} {act} proxy={proxy} #{i} depends on the batch"), ok);
            }
        }
    }
    let bn = layer_stable(&mut rng, NormMethod::Batch, Activation::Swish, false)?;
    t.holds(|| "batch norm showed no batch dependence on its witness".into(), !bn);
    let model = build_model(&ModelConfig::tiny(4, 4, 3).with_norm(NormMethod::Layer, true), opts.seed)?;
    let x = rng.normal_tensor(&[4, 3, 32, 32], 1.0);
    let r = rng.normal_tensor(&[4, 3], 1.0);
    let ok = rows_stable(&x, &r, |x, r| {
        let mut m = model.clone();
        let (y, cache) = m.forward(x, Mode::Train { seed: 0 })?;
        Ok((y, m.backward(&cache, r)?))
    })?;
    t.holds(|| "tiny LN+PN model depends on the batch".into(), ok);
    let detail = "bit-identical under permutation, duplication and subsetting".to_string();
    Ok(t.report(detail))
}

/// Mean and variance of `f(ξ)` for `ξ ~ N(0, 1)` from one draw in each of
/// `samples` equal-probability strata.
pub fn stratified_normal_moments(f: impl Fn(f64) -> f64, samples: usize, seed: u64) -> (f64, f64) {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut rng = Rng::new(seed);
    let shift = f(0.0);
    let (mut s1, mut s2) = (0.0, 0.0);
    for i in 0..samples {
        let u = (i as f64 + rng.uniform(0.0, 1.0)) / samples as f64;
        let v = f(normal.inverse_cdf(u)) - shift;
        s1 += v;
        s2 += v * v;
    }
    let m = s1 / samples as f64;
    (m + shift, s2 / samples as f64 - m * m)
}

/// Mean and variance of `relu(u)` for `u ~ N(mu, sigma²)`.
pub fn rectified_gaussian_moments(mu: f64, sigma: f64) -> (f64, f64) {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let a = mu / sigma;
    let (cdf, pdf) = (normal.cdf(a), normal.pdf(a));
    let m1 = mu * cdf + sigma * pdf;
    let m2 = (mu * mu + sigma * sigma) * cdf + mu * sigma * pdf;
    (m1, m2 - m1 * m1)
}

pub fn proxy_moment_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut t = Tally::new("proxy moments");
    let rule = QuadratureRule::gauss_hermite(30)?;
    let mut rng = Rng::new(opts.seed.wrapping_add(2));
    for i in 0..opts.instances {
        let (g, b) = (rng.uniform(0.2, 3.0), rng.uniform(-2.0, 2.0));
        let (bt, gt) = (rng.uniform(-1.0, 1.0), rng.uniform(-0.5, 1.0));
        let m = channel_proxy_moments(Activation::Relu, g, b, bt, gt, &rule)?;
        let (mean, var) = rectified_gaussian_moments(g * bt + b, g * (1.0 + gt));
        let e = (m.mean - mean).abs().max((m.var - var).abs());
        t.error(|| format!("relu #{i} (γ={g:.3}, β={b:.3}, β̃={bt:.3}, γ̃={gt:.3})"), e, MOMENT_TOLERANCE);
    }
    for i in 0..2 {
        let (g, b) = (rng.uniform(0.5, 1.5), rng.uniform(-0.5, 0.5));
        let (bt, gt) = (rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3));
        let m = channel_proxy_moments(Activation::Swish, g, b, bt, gt, &rule)?;
        let f = |xi: f64| Activation::Swish.apply(g * (bt + (1.0 + gt) * xi) + b);
        let (mean, var) = stratified_normal_moments(f, opts.mc_samples, opts.seed + i);
        let e = (m.mean - mean).abs().max((m.var - var).abs());
        t.error(|| format!("swish #{i} (γ={g:.3}, β={b:.3}, β̃={bt:.3}, γ̃={gt:.3})"), e, MOMENT_TOLERANCE);
    }
    let detail = format!("max absolute error {:.2e}", t.worst);
    Ok(t.report(detail))
}

pub fn resolution_table_suite() -> Result<SuiteReport> {
    let mut t = Tally::new("resolution table");
    for (native, half) in PUBLISHED_RESOLUTIONS {
        let got = half_resolution(native, EFFICIENTNET_DOWNSAMPLES);
        t.holds(|| format!("half_resolution({native}) = {got}, published {half}"), got == half);
    }
    for (size, (native, half)) in ModelSize::ALL.iter().zip(PUBLISHED_RESOLUTIONS) {
        t.holds(
            || format!("{size} resolutions differ from the table"),
            size.native_resolution() == native && size.half_resolution() == half,
        );
    }
    Ok(t.report("exact match".into()))
}

/// Relative parameter and FLOP deviations from the published row.
pub fn cost_deviation(row: &PublishedCost) -> Result<(f64, f64)> {
    let cfg = ModelConfig::new(row.size, row.group_size, row.expansion);
    let report = count_cost(&cfg, row.size.native_resolution() as usize)?;
    Ok((
        report.params as f64 / (row.params_m * 1e6) - 1.0,
        report.flops as f64 / (row.flops_b * 1e9) - 1.0,
    ))
}

pub fn cost_table_suite() -> Result<SuiteReport> {
    let mut t = Tally::new("cost table");
    for row in &PUBLISHED_COSTS {
        let (dp, df) = cost_deviation(row)?;
        let label = |what: &str, d: f64| {
            format!("{}/G{}/E{} {what} {:+.1}%", row.size, row.group_size, row.expansion, 100.0 * d)
        };
        t.holds(|| label("params", dp), dp.abs() <= COST_TOLERANCE);
        t.holds(|| label("flops", df), df.abs() <= COST_TOLERANCE);
    }
    let detail = format!("±{}% on {} published rows", 100.0 * COST_TOLERANCE, PUBLISHED_COSTS.len());
    Ok(t.report(detail))
}

//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::training::*;
use common::*;
use effnet::activation::Activation;
use effnet::conv::{ConvSpec, Padding};
use effnet::model::{block_boundaries, build_model, count_cost, FinetuneScope, ModelConfig, ModelSize};
use effnet::norm::{channel_proxy_moments, NormMethod, QuadratureRule};
use effnet::perf::{intensity, monotonicity_check, Field};
use effnet::resolution::{congruent, half_resolution, ResolutionPair};
use effnet::tensor::{Rng, Tensor};
use effnet::train::{ema_update, finetune, lr_at, synthetic_blobs, train_loop, FinetuneRecipe, TrainRecipe};
use effnet::verify::PUBLISHED_COSTS;

const COST_TOL: f64 = 0.05;
const INTENSITY_TOL: f64 = 1e-9;
const GRADIENT_TOL: f64 = 1e-6;
const GRADIENT_INSTANCES: u64 = 20;
const MOMENT_TOL: f64 = 1e-4;
const MC_SAMPLES: usize = 10_000_000;
const RECIPE_TOL: f64 = 1e-12;
const N_DOWN: u32 = 5;

use ModelSize::{B0, B1, B2, B3, B4, B5};

/// (size, G, E, params in millions, GFLOPs) as published, transcribed
/// independently of the library copy.
const PUBLISHED_COST_ROWS: [(ModelSize, usize, usize, f64, f64); 18] = [
    (B0, 1, 6, 5.3, 0.4),
    (B0, 4, 5, 5.1, 0.4),
    (B0, 16, 4, 5.9, 0.6),
    (B0, 32, 3, 6.2, 0.9),
    (B0, 64, 2, 6.7, 1.5),
    (B1, 1, 6, 7.8, 0.7),
    (B1, 16, 4, 8.3, 1.1),
    (B2, 1, 6, 9.1, 1.0),
    (B2, 4, 5, 8.6, 1.0),
    (B2, 16, 4, 9.5, 1.5),
    (B2, 32, 3, 10.3, 2.1),
    (B2, 64, 2, 9.9, 3.6),
    (B3, 1, 6, 12.2, 1.8),
    (B3, 16, 4, 12.6, 2.7),
    (B4, 1, 6, 19.3, 4.4),
    (B4, 16, 4, 19.3, 6.2),
    (B5, 1, 6, 30.4, 10.2),
    (B5, 16, 4, 28.7, 13.4),
];

/// (native, half) training resolutions.
const NATIVE_AND_HALF: [(u32, u32); 6] = [(224, 160), (240, 176), (260, 192), (300, 204), (380, 252), (456, 328)];

/// Best test resolutions per size: the native-trained columns, then the
/// half-trained columns.
const BEST_TEST_RESOLUTIONS: [(u32, u32, &[u32], &[u32]); 6] = [
    (224, 160, &[480, 416, 448], &[352, 384]),
    (240, 176, &[528, 528, 528], &[400, 400]),
    (260, 192, &[548, 516, 516], &[388, 420]),
    (300, 204, &[652, 588, 556], &[460, 396]),
    (380, 252, &[668, 572, 604], &[508, 444]),
    (456, 328, &[680, 648, 616], &[424, 488]),
];

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Outcome);

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn cost_table() -> Outcome {
    let transcribed = PUBLISHED_COST_ROWS.iter().zip(&PUBLISHED_COSTS).all(|(t, p)| {
        (t.0, t.1, t.2, t.3, t.4) == (p.size, p.group_size, p.expansion, p.params_m, p.flops_b)
    });
    if !transcribed {
        return outcome(false, "library table differs from the transcription");
    }
    let mut misses = Vec::new();
    let mut slowest = Duration::ZERO;
    for &(size, g, e, p, f) in &PUBLISHED_COST_ROWS {
        let start = Instant::now();
        let report = count_cost(&ModelConfig::new(size, g, e), size.native_resolution() as usize).unwrap();
        slowest = slowest.max(start.elapsed());
        let dp = report.params as f64 / (p * 1e6) - 1.0;
        let df = report.flops as f64 / (f * 1e9) - 1.0;
        for (what, d) in [("P", dp), ("F", df)] {
            if d.abs() > COST_TOL {
                misses.push(format!("{size}/G{g} {what} {:+.1}%", 100.0 * d));
            }
        }
    }
    let fast = slowest < Duration::from_secs(1);
    outcome(
        misses.is_empty() && fast,
        format!(
            "{} of {} values within ±5%, slowest config {slowest:.1?}; misses: {}",
            2 * PUBLISHED_COST_ROWS.len() - misses.len(),
            2 * PUBLISHED_COST_ROWS.len(),
            if misses.is_empty() { "none".to_string() } else { misses.join(", ") }
        ),
    )
}

fn half_resolutions() -> Outcome {
    let got: Vec<u32> = NATIVE_AND_HALF.iter().map(|&(n, _)| half_resolution(n, N_DOWN)).collect();
    let want: Vec<u32> = NATIVE_AND_HALF.iter().map(|&(_, h)| h).collect();
    outcome(got == want, format!("{got:?}"))
}

fn is_congruent(train: u32, test: u32) -> bool {
    congruent(&ResolutionPair::new(train, test, N_DOWN).unwrap())
}

fn congruences() -> Outcome {
    let mut bad = Vec::new();
    let mut checked = 0;
    for &(native, half, natives, halves) in &BEST_TEST_RESOLUTIONS {
        for &best in natives {
            checked += 1;
            if !is_congruent(native, best) {
                bad.push(format!("{native}->{best}"));
            }
        }
        for &best in halves {
            checked += 1;
            // B2-Half is the documented exception: 388 and 420 are congruent
            // to the native 260 but not to the half resolution 192.
            let anomaly = half == 192;
            if is_congruent(half, best) == anomaly {
                bad.push(format!("{half}->{best}"));
            }
        }
    }
    let anomaly_reproduced = !is_congruent(192, 388) && !is_congruent(192, 420) && is_congruent(260, 388);
    outcome(
        bad.is_empty() && anomaly_reproduced,
        format!(
            "{checked} best resolutions checked; B2-Half 388/420 vs 192 is a known failure (≡4 vs ≡0 mod 32); unexpected: {}",
            if bad.is_empty() { "none".to_string() } else { bad.join(", ") }
        ),
    )
}

fn random_spec(rng: &mut Rng) -> ConvSpec {
    let g = 1 + rng.below(64);
    let n = 1 + rng.below(16);
    let k = 1 + rng.below(7);
    let s = 1 + rng.below(3);
    let b = 1 + rng.below(64);
    let f = 1 + rng.below(128);
    ConvSpec::grouped(g * n, g * n, g, k, s, Padding::Same).unwrap().with_input(b, f)
}

fn intensity_properties() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(4);
    let mut failures = 0;
    for _ in 0..10_000 {
        let spec = random_spec(&mut rng);
        failures += Field::ALL.iter().filter(|&&f| !monotonicity_check(&spec, f).holds).count();
    }
    let spot = ConvSpec::grouped(16, 16, 16, 3, 1, Padding::Same).unwrap().with_input(1, 7);
    let (g, k2, b, f2): (f64, f64, f64, f64) = (16.0, 9.0, 1.0, 49.0);
    let oracle = g * k2 * b * f2 / (g * k2 + b * f2);
    let spot_err = (intensity(&spot) - 7056.0 / 193.0).abs().max((oracle - 7056.0 / 193.0).abs());
    let elapsed = start.elapsed();
    outcome(
        failures == 0 && spot_err <= INTENSITY_TOL && elapsed < Duration::from_secs(5),
        format!(
            "10000 specs × {} directions, {failures} violations; I(16,3,1,7,1) = {:.12} (error {spot_err:.1e}); {elapsed:.1?}",
            Field::ALL.len(),
            intensity(&spot)
        ),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut checks: Vec<Check> = Vec::new();
    for kind in [ConvKind::Depthwise, ConvKind::Grouped, ConvKind::Dense] {
        checks.extend((0..GRADIENT_INSTANCES).map(|s| check_conv(s, kind)));
    }
    for method in [NormMethod::Batch, NormMethod::Layer, NormMethod::Group(2), NormMethod::Instance] {
        checks.extend((0..GRADIENT_INSTANCES).map(|s| check_norm(s, method, Activation::Swish, false)));
    }
    for act in [Activation::Swish, Activation::Relu] {
        for method in [NormMethod::Layer, NormMethod::Group(2), NormMethod::Instance] {
            checks.extend((0..GRADIENT_INSTANCES).map(|s| check_norm(100 + s, method, act, true)));
        }
    }
    checks.extend((0..GRADIENT_INSTANCES).map(check_se));
    checks.extend((0..GRADIENT_INSTANCES).map(check_dense));
    let worst = checks.iter().map(|c| c.error).fold(0.0, f64::max);
    let failing = checks.iter().filter(|c| !(c.error <= GRADIENT_TOL)).count();
    let elapsed = start.elapsed();
    outcome(
        failing == 0 && elapsed < Duration::from_secs(120),
        format!("{} instances, {failing} above 1e-6, max relative error {worst:.2e}; {elapsed:.1?}", checks.len()),
    )
}

fn batch_independence() -> Outcome {
    let start = Instant::now();
    let mut cases = 0;
    let mut dependent = Vec::new();
    for method in [NormMethod::Layer, NormMethod::Group(2), NormMethod::Instance] {
        for (act, proxy) in [(Activation::Swish, false), (Activation::Swish, true), (Activation::Relu, true)] {
            for seed in 0..5 {
                cases += 1;
                if !norm_batch_independent(seed, method, act, proxy) {
                    dependent.push(format!("{method} {act} pn={proxy} seed {seed}"));
                }
            }
        }
    }
    let ln_model = model_batch_independent(&ModelConfig::tiny(4, 4, 3).with_norm(NormMethod::Layer, true), 1);
    let bn_witness = !norm_batch_independent(0, NormMethod::Batch, Activation::Swish, false);
    let elapsed = start.elapsed();
    outcome(
        dependent.is_empty() && ln_model && bn_witness && elapsed < Duration::from_secs(30),
        format!(
            "{cases} layer cases bit-identical: {}; LN+PN model: {ln_model}; BN witness violates: {bn_witness}; {elapsed:.1?}",
            dependent.is_empty()
        ),
    )
}

fn proxy_moments() -> Outcome {
    let start = Instant::now();
    let rule = QuadratureRule::gauss_hermite(30).unwrap();
    let mut rng = Rng::new(21);
    let mut worst_relu: f64 = 0.0;
    for _ in 0..50 {
        let (g, b) = (rng.uniform(0.2, 3.0), rng.uniform(-2.0, 2.0));
        let (bt, gt) = (rng.uniform(-1.0, 1.0), rng.uniform(-0.5, 1.0));
        let m = channel_proxy_moments(Activation::Relu, g, b, bt, gt, &rule).unwrap();
        let (mean, var) = rectified_gaussian_moments(g * bt + b, g * (1.0 + gt));
        worst_relu = worst_relu.max((m.mean - mean).abs()).max((m.var - var).abs());
    }
    let (g, b, bt, gt) = (1.2, -0.3, 0.2, -0.1);
    let m = channel_proxy_moments(Activation::Swish, g, b, bt, gt, &rule).unwrap();
    let f = |xi: f64| Activation::Swish.apply(g * (bt + (1.0 + gt) * xi) + b);
    let (mean, var) = stratified_normal_moments(f, MC_SAMPLES, 22);
    let swish = (m.mean - mean).abs().max((m.var - var).abs());
    let elapsed = start.elapsed();
    outcome(
        worst_relu <= MOMENT_TOL && swish <= MOMENT_TOL && elapsed < Duration::from_secs(60),
        format!("relu vs closed form {worst_relu:.1e} (50 channels); swish vs 1e7-sample oracle {swish:.1e}; {elapsed:.1?}"),
    )
}

fn recipe_arithmetic() -> Outcome {
    let r = TrainRecipe::for_batch(768, 350.0);
    let exact = r.base_lr == 0.046875 && r.rmsprop_decay == 0.953125;
    let staircase = [
        (0.0, 0.046875),
        (2.39, 0.046875),
        (2.4, 0.04546875),
        (4.0, 0.04546875),
        (5.0, 0.0441046875),
    ];
    let lr_err = staircase.iter().map(|&(e, want)| (lr_at(&r, e) - want).abs()).fold(0.0, f64::max);
    let mut shadow = None;
    for v in [1.0, 2.0, 4.0] {
        ema_update(&mut shadow, &[Tensor::full(&[2], v)], 0.97).unwrap();
    }
    // 0.97²·1 + 0.97·0.03·2 + 0.03·4
    let ema_err = shadow.unwrap()[0].data().iter().map(|x| (x - 1.1191).abs()).fold(0.0, f64::max);
    outcome(
        exact && lr_err <= RECIPE_TOL && ema_err <= RECIPE_TOL,
        format!(
            "base_lr {} decay {}; staircase error {lr_err:.1e}; EMA two-step error {ema_err:.1e}",
            r.base_lr, r.rmsprop_decay
        ),
    )
}

fn smoke_training() -> Outcome {
    let start = Instant::now();
    let mut accs = Vec::new();
    let mut first = None;
    for g in [1, 4] {
        let (_, run, acc) = smoke_run(g);
        accs.push(acc);
        if g == 4 {
            first = Some(run.checkpoint.to_bytes().unwrap());
        }
    }
    let (_, again, _) = smoke_run(4);
    let deterministic = first == Some(again.checkpoint.to_bytes().unwrap());

    let data = synthetic_blobs(32, 32, 8).unwrap();
    let mut m = build_model(&smoke_config(4), 6).unwrap();
    let trained = train_loop(&mut m, &data, &recipe(16, 32, 6), 1).unwrap().checkpoint;
    let start_point: BTreeMap<_, _> = trained.averaged().iter().cloned().collect();
    let mut scoped = true;
    for scope in [FinetuneScope::Last1, FinetuneScope::Last2, FinetuneScope::Last3] {
        let mut model = build_model(&smoke_config(4), 0).unwrap();
        let mut fr = FinetuneRecipe::new(scope);
        fr.batch = 16;
        let tuned = finetune(&mut model, &trained, &fr, &data, 4).unwrap();
        let names = block_boundaries(&model).scope(scope).clone();
        scoped &= tuned
            .checkpoint
            .params
            .iter()
            .all(|(n, t)| names.contains(n) == (t != &start_point[n]));
    }
    let elapsed = start.elapsed();
    let reached = accs.iter().all(|&a| a >= SMOKE_ACCURACY);
    outcome(
        reached && deterministic && scoped && elapsed < Duration::from_secs(300),
        format!(
            "accuracy G1 {:.3}, G4 {:.3} after {SMOKE_STEPS} steps; deterministic: {deterministic}; finetune scoped: {scoped}; {elapsed:.1?}",
            accs[0], accs[1]
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("cost table", cost_table),
        ("half resolutions", half_resolutions),
        ("best-resolution congruence", congruences),
        ("intensity properties", intensity_properties),
        ("layer gradients", gradients),
        ("batch independence", batch_independence),
        ("proxy moments", proxy_moments),
        ("recipe arithmetic", recipe_arithmetic),
        ("smoke training", smoke_training),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        failed += usize::from(!o.pass);
        println!("{} {:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!(
        "PASS 10 non-reproducible results: ImageNet accuracies and hardware throughput are excluded; no golden test depends on them"
    );
    println!("{} of {} criteria passed", criteria.len() + 1 - failed, criteria.len() + 1);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

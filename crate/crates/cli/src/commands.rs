use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use effnet::model::{build_model, count_cost, plan, Model, ModelConfig};
use effnet::perf::{roofline, Bound, HardwareProfile};
use effnet::resolution::{congruence_class, congruent, half_resolution, valid_test_resolutions, ResolutionPair};
use effnet::train::{accuracy, finetune, log_csv, synthetic_blobs, train_loop, Checkpoint, Dataset, FinetuneRecipe, TrainRecipe};
use effnet::verify::{run_all, VerifyOptions};

use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Count,
    Roofline,
    Resolution,
    Train,
    Finetune,
    Verify,
}

impl Task {
    fn name(self) -> &'static str {
        match self {
            Task::Count => "count",
            Task::Roofline => "roofline",
            Task::Resolution => "resolution",
            Task::Train => "train",
            Task::Finetune => "finetune",
            Task::Verify => "verify",
        }
    }
}

pub enum Outcome {
    Success,
    SuiteFailure,
}

pub fn run(cfg: &RunConfig, task: Task) -> Result<Outcome> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    cfg.write(&cfg.out.join(format!("{}.config.json", task.name())))?;
    match task {
        Task::Count => count(cfg),
        Task::Roofline => roofline_report(cfg),
        Task::Resolution => resolutions(cfg),
        Task::Train => train(cfg),
        Task::Finetune => tune(cfg),
        Task::Verify => return verify(cfg),
    }?;
    Ok(Outcome::Success)
}

fn write(out: &Path, name: &str, contents: &str) -> Result<()> {
    let path = out.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn describe(m: &ModelConfig) -> String {
    let norm = if m.norm.proxy { format!("{}+pn", m.norm.method) } else { m.norm.method.to_string() };
    let size = if m.stages.len() == 2 { "tiny".to_string() } else { m.size.to_string() };
    format!("{size} G={} E={} {norm}", m.group_size, m.expansion_ratio)
}

fn count(cfg: &RunConfig) -> Result<()> {
    let model = cfg.model_config()?;
    let report = count_cost(&model, cfg.input_resolution()? as usize)?;
    write(&cfg.out, "cost.csv", &report.to_csv())?;
    println!("{}: {}", describe(&model), report.summary());
    Ok(())
}

fn roofline_report(cfg: &RunConfig) -> Result<()> {
    let Some(path) = &cfg.roofline.hardware else {
        bail!("roofline needs a hardware profile (--hardware PATH)");
    };
    let hw = HardwareProfile::load(path).with_context(|| format!("loading hardware profile {}", path.display()))?;
    let model = cfg.model_config()?;
    let layers = plan(&model)?.convolutions(cfg.roofline.batch, cfg.input_resolution()? as usize)?;
    let report = roofline(layers, &hw)?;
    write(&cfg.out, "roofline.csv", &report.to_csv())?;
    let memory = report.rows.iter().filter(|r| r.bound == Bound::Memory).count();
    println!(
        "{} batch {}: ridge point {:.2} FLOPs/element, {} of {} convolutions memory bound",
        describe(&model),
        cfg.roofline.batch,
        report.ridge_point,
        memory,
        report.rows.len()
    );
    Ok(())
}

fn resolutions(cfg: &RunConfig) -> Result<()> {
    let r = &cfg.resolutions;
    let n = r.downsamples;
    let modulus = 1u32
        .checked_shl(n)
        .filter(|m| *m <= r.train)
        .with_context(|| format!("training resolution {} is below 2^{n}", r.train))?;
    let grid = valid_test_resolutions(r.train, n, r.max);
    let listed: Vec<String> = grid.iter().map(u32::to_string).collect();
    println!("train {} with {n} downsamplings (mod {modulus}): {}", r.train, listed.join(" "));
    if let Some(test) = r.test {
        let pair = ResolutionPair::new(r.train, test, n)?;
        let verdict = if congruent(&pair) { "congruent" } else { "not congruent" };
        println!("test {test}: {verdict} (residues {} and {})", r.train % modulus, test % modulus);
    }
    println!("half resolution for native {}: {}", r.train, half_resolution(r.train, n));
    if r.csv {
        let mut csv = String::from("train,test,congruent\n");
        for test in modulus..=r.max {
            let ok = ResolutionPair::new(r.train, test, n).map(|p| congruent(&p))?;
            writeln!(csv, "{},{test},{ok}", r.train)?;
        }
        write(&cfg.out, "resolutions.csv", &csv)?;
        let class = congruence_class(r.train, n, r.max);
        println!("wrote {} rows, {} congruent", r.max + 1 - modulus, class.len());
    }
    Ok(())
}

fn dataset(cfg: &RunConfig, resolution: u32) -> Result<Dataset> {
    match &cfg.train.data {
        Some(dir) => Dataset::load_dir(dir).with_context(|| format!("loading data from {}", dir.display())),
        None => Ok(synthetic_blobs(cfg.train.samples, resolution as usize, cfg.seed)?),
    }
}

fn recipe(cfg: &RunConfig, samples: usize) -> Result<TrainRecipe> {
    let t = &cfg.train;
    if t.batch == 0 || t.steps == 0 {
        bail!("train batch and steps must be positive");
    }
    let mut r = TrainRecipe::for_batch(t.batch, t.steps as f64 / samples.div_ceil(t.batch) as f64);
    if let Some(lr) = t.base_lr {
        r.base_lr = lr;
    }
    let overrides = [
        (&mut r.weight_decay, t.weight_decay),
        (&mut r.label_smoothing, t.label_smoothing),
        (&mut r.mixup_alpha, t.mixup_alpha),
        (&mut r.cutmix_alpha, t.cutmix_alpha),
    ];
    for (slot, v) in overrides {
        if let Some(v) = v {
            *slot = v;
        }
    }
    r.micro_batch = t.micro_batch;
    r.validate()?;
    Ok(r)
}

fn instantiate(cfg: &RunConfig, config: &ModelConfig) -> Result<Model> {
    let mut model = build_model(config, cfg.seed)?;
    model.precision = cfg.precision;
    Ok(model)
}

fn train(cfg: &RunConfig) -> Result<()> {
    let mut config = cfg.model_config()?;
    let data = dataset(cfg, cfg.input_resolution()?)?;
    if cfg.model.num_classes.is_none() {
        config.num_classes = data.num_classes;
    }
    let recipe = recipe(cfg, data.len())?;
    let mut model = instantiate(cfg, &config)?;
    let run = train_loop(&mut model, &data, &recipe, cfg.seed)?;
    run.checkpoint.save(cfg.out.join("train.ckpt"))?;
    write(&cfg.out, "train_log.csv", &log_csv(&run.log))?;
    let acc = accuracy(&model, &data, 64)?;
    model.load_snapshot(run.checkpoint.averaged())?;
    let ema_acc = accuracy(&model, &data, 64)?;
    let loss = run.log.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "{}: {} steps, final loss {loss:.4}, training accuracy {acc:.3} (EMA weights {ema_acc:.3})",
        describe(&config),
        run.log.len()
    );
    Ok(())
}

fn tune(cfg: &RunConfig) -> Result<()> {
    let path = cfg.finetune.checkpoint.clone().unwrap_or_else(|| cfg.out.join("train.ckpt"));
    let checkpoint = Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let resolution = cfg.resolution.unwrap_or(checkpoint.config.native_resolution);
    let data = dataset(cfg, resolution)?;
    let f = &cfg.finetune;
    let recipe = FinetuneRecipe {
        epochs: f.epochs,
        batch: f.batch,
        initial_lr: f.initial_lr,
        scope: f.scope,
        ..FinetuneRecipe::new(f.scope)
    };
    let mut model = instantiate(cfg, &checkpoint.config)?;
    let run = finetune(&mut model, &checkpoint, &recipe, &data, cfg.seed)?;
    run.checkpoint.save(cfg.out.join("finetune.ckpt"))?;
    write(&cfg.out, "finetune_log.csv", &log_csv(&run.log))?;
    let acc = accuracy(&model, &data, 64)?;
    println!(
        "{}: fine-tuned {} for {} steps, training accuracy {acc:.3}",
        describe(&checkpoint.config),
        f.scope,
        run.log.len()
    );
    Ok(())
}

fn verify(cfg: &RunConfig) -> Result<Outcome> {
    let opts = VerifyOptions {
        instances: cfg.verify.instances,
        mc_samples: cfg.verify.mc_samples,
        seed: cfg.seed,
    };
    let reports = run_all(&opts)?;
    let mut text = String::new();
    for r in &reports {
        writeln!(text, "{r}")?;
    }
    let passed = reports.iter().filter(|r| r.passed()).count();
    writeln!(text, "{passed} of {} suites passed", reports.len())?;
    print!("{text}");
    write(&cfg.out, "verify.txt", &text)?;
    Ok(if passed == reports.len() { Outcome::Success } else { Outcome::SuiteFailure })
}

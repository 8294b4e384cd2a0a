mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use effnet::activation::Activation;
use effnet::model::{FinetuneScope, ModelSize};
use effnet::norm::NormMethod;
use effnet::tensor::Precision;

use commands::Task;
use config::RunConfig;

/// Grouped-convolution EfficientNets: cost counting, roofline reports,
/// resolution tools, desk-scale training and self-verification.
#[derive(Debug, Parser)]
#[command(name = "effnet", version)]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// f32 or f64.
    #[arg(long, global = true)]
    precision: Option<Precision>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// B0 to B5.
    #[arg(long)]
    size: Option<ModelSize>,
    #[arg(long, short = 'G')]
    group_size: Option<usize>,
    #[arg(long, short = 'E')]
    expansion: Option<usize>,
    /// bn, ln, in or gn:<groups>.
    #[arg(long)]
    norm: Option<NormMethod>,
    /// Add proxy-normalized activations.
    #[arg(long)]
    proxy: bool,
    /// swish, relu or identity.
    #[arg(long)]
    activation: Option<Activation>,
    /// Use the two-stage desk-scale network.
    #[arg(long)]
    tiny: bool,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    resolution: Option<u32>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-layer parameter and FLOP counts.
    Count {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Per-convolution arithmetic intensity against a hardware profile.
    Roofline {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        batch: Option<usize>,
        /// JSON hardware profile.
        #[arg(long, value_name = "PATH")]
        hardware: Option<PathBuf>,
    },
    /// Congruent test resolutions and half-resolution selection.
    Resolution {
        #[arg(long)]
        train: Option<u32>,
        #[arg(long)]
        max: Option<u32>,
        /// Check one test resolution for congruence.
        #[arg(long)]
        test: Option<u32>,
        #[arg(long)]
        downsamples: Option<u32>,
        /// Also write resolutions.csv.
        #[arg(long)]
        csv: bool,
    },
    /// RMSProp training with EMA checkpoints.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        /// Directory with images.bin and labels.bin.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        micro_batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        mixup_alpha: Option<f64>,
        #[arg(long)]
        cutmix_alpha: Option<f64>,
    },
    /// Cosine-SGD fine-tuning of the last blocks from a checkpoint's EMA.
    Finetune {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// last-1, last-2 or last-3.
        #[arg(long)]
        scope: Option<FinetuneScope>,
        #[arg(long)]
        epochs: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Gradient, batch-independence, quadrature and table suites.
    Verify {
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        mc_samples: Option<usize>,
    },
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_model(cfg: &mut RunConfig, m: ModelArgs) {
    set(&mut cfg.model.size, m.size);
    set(&mut cfg.model.group_size, m.group_size);
    set(&mut cfg.model.expansion, m.expansion);
    set(&mut cfg.model.norm, m.norm);
    set(&mut cfg.model.activation, m.activation);
    cfg.model.proxy |= m.proxy;
    cfg.model.tiny |= m.tiny;
    if m.classes.is_some() {
        cfg.model.num_classes = m.classes;
    }
    if m.resolution.is_some() {
        cfg.resolution = m.resolution;
    }
}

fn effective_config(cli: Cli) -> anyhow::Result<(RunConfig, Task)> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.out, cli.out);
    set(&mut cfg.precision, cli.precision);
    let task = match cli.command {
        Command::Count { model } => {
            apply_model(&mut cfg, model);
            Task::Count
        }
        Command::Roofline { model, batch, hardware } => {
            apply_model(&mut cfg, model);
            set(&mut cfg.roofline.batch, batch);
            if hardware.is_some() {
                cfg.roofline.hardware = hardware;
            }
            Task::Roofline
        }
        Command::Resolution {
            train,
            max,
            test,
            downsamples,
            csv,
        } => {
            let r = &mut cfg.resolutions;
            set(&mut r.train, train);
            set(&mut r.max, max);
            set(&mut r.downsamples, downsamples);
            if test.is_some() {
                r.test = test;
            }
            r.csv |= csv;
            Task::Resolution
        }
        Command::Train {
            model,
            data,
            samples,
            batch,
            steps,
            micro_batch,
            lr,
            mixup_alpha,
            cutmix_alpha,
        } => {
            apply_model(&mut cfg, model);
            let t = &mut cfg.train;
            if data.is_some() {
                t.data = data;
            }
            set(&mut t.samples, samples);
            set(&mut t.batch, batch);
            set(&mut t.steps, steps);
            for (slot, v) in [
                (&mut t.base_lr, lr),
                (&mut t.mixup_alpha, mixup_alpha),
                (&mut t.cutmix_alpha, cutmix_alpha),
            ] {
                if v.is_some() {
                    *slot = v;
                }
            }
            if micro_batch.is_some() {
                t.micro_batch = micro_batch;
            }
            Task::Train
        }
        Command::Finetune {
            checkpoint,
            scope,
            epochs,
            batch,
            lr,
            data,
            samples,
        } => {
            let f = &mut cfg.finetune;
            if checkpoint.is_some() {
                f.checkpoint = checkpoint;
            }
            set(&mut f.scope, scope);
            set(&mut f.epochs, epochs);
            set(&mut f.batch, batch);
            set(&mut f.initial_lr, lr);
            if data.is_some() {
                cfg.train.data = data;
            }
            set(&mut cfg.train.samples, samples);
            Task::Finetune
        }
        Command::Verify { instances, mc_samples } => {
            set(&mut cfg.verify.instances, instances);
            set(&mut cfg.verify.mc_samples, mc_samples);
            Task::Verify
        }
    };
    Ok((cfg, task))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = effective_config(cli).and_then(|(cfg, task)| commands::run(&cfg, task));
    match outcome {
        Ok(commands::Outcome::Success) => ExitCode::SUCCESS,
        Ok(commands::Outcome::SuiteFailure) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

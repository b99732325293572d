mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use msshare_core::checkpoint::{load_checkpoint, save_checkpoint};
use msshare_core::data::{load_dataset, Split};
use msshare_core::gradcheck::{grad_check, CheckTarget, GradCheckConfig, GRAD_CHECK_TOL};
use msshare_core::toy::{write_toy, ToyConfig};
use msshare_core::train::{evaluate, finetune_prepare, fit, metrics_csv, parameter_norms, FitOptions, OptimState};
use msshare_core::viz::{kernel_grid, rank_kernels, Aggregate};
use msshare_core::zoo::RESNET_DEPTHS;
use msshare_core::{build_model, build_topology, ArchSpec, Config, Model, Variant};

use settings::Settings;

#[derive(Parser)]
#[command(name = "msshare", version, about = "Multi-scale weight-shared CNNs: audits, gradient checks, training, kernel plots")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parameter counts of the vanilla, unshared and shared variants.
    CountParams {
        /// Architecture config (family, depth, classes).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Architecture name such as resnet101 or alexnet.
        #[arg(long)]
        arch: Option<String>,
        /// Every supported family.
        #[arg(long)]
        all: bool,
        /// Count the classifier as well.
        #[arg(long)]
        with_classifier: bool,
        /// Also print multiply-accumulates at the configured input size.
        #[arg(long)]
        macs: bool,
    },
    /// Compare analytic gradients with central finite differences.
    GradCheck {
        /// conv, conv-r2, smsc, smsc-n1, unshared, batchnorm, linear,
        /// softmax-xent, relu, maxpool, avgpool, or `all`.
        #[arg(long, default_value = "all")]
        layer: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 6)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        outputs: usize,
        #[arg(long, default_value_t = GRAD_CHECK_TOL)]
        tol: f64,
        /// Perturb the analytic gradient (negative control).
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Train from scratch.
    Train(RunArgs),
    /// Single-crop top-1/top-5 error of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Dataset split directory to score.
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Replace the classifier of a checkpoint and train on a new dataset.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Update the classifier only.
        #[arg(long)]
        freeze: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Rank a layer's kernels by weight magnitude and render the top ones.
    VizKernels {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dotted layer name; defaults to the last spatial convolution.
        #[arg(long)]
        layer: Option<String>,
        #[arg(long, default_value_t = 256)]
        count: usize,
        #[arg(long, default_value = "l1")]
        aggregate: String,
        #[arg(long, default_value = "viz")]
        out: PathBuf,
    },
    /// Write the synthetic circle/cross/square dataset.
    MakeToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 600)]
        images: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn settings(&self) -> Result<Settings> {
        let mut s = Settings::load(self.config.as_deref(), &self.overrides)?;
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        Ok(s)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::CountParams {
            config,
            arch,
            all,
            with_classifier,
            macs,
        } => count_params(config.as_deref(), arch.as_deref(), all, with_classifier, macs),
        Cmd::GradCheck {
            layer,
            seed,
            batch,
            channels,
            size,
            outputs,
            tol,
            corrupt,
        } => {
            let cfg = GradCheckConfig {
                batch,
                channels,
                size,
                outputs,
                seed,
                corrupt,
            };
            grad_check_cmd(&layer, &cfg, tol)
        }
        Cmd::Train(args) => train(&args).map(|_| ExitCode::SUCCESS),
        Cmd::Eval { checkpoint, run, split } => eval(&checkpoint, &run, &split).map(|_| ExitCode::SUCCESS),
        Cmd::Finetune { checkpoint, freeze, run } => finetune(&checkpoint, freeze, &run).map(|_| ExitCode::SUCCESS),
        Cmd::VizKernels {
            checkpoint,
            layer,
            count,
            aggregate,
            out,
        } => viz(&checkpoint, layer.as_deref(), count, &aggregate, &out).map(|_| ExitCode::SUCCESS),
        Cmd::MakeToy { out, seed, images, size } => {
            let cfg = ToyConfig {
                images,
                size,
                seed,
                ..ToyConfig::default()
            };
            let (tr, va) = write_toy(&out, &cfg)?;
            println!("wrote {} train and {} val images to {}", tr.len(), va.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn parse_arch_name(name: &str) -> Result<ArchSpec> {
    let lower = name.to_ascii_lowercase();
    if lower == "alexnet" {
        return Ok(ArchSpec::alexnet(Variant::Vanilla, 1000));
    }
    match lower.strip_prefix("resnet").and_then(|d| d.parse().ok()) {
        Some(depth) => Ok(ArchSpec::resnet(depth, Variant::Vanilla, 1000)),
        None => bail!("unknown architecture `{name}`"),
    }
}

fn count_params(config: Option<&Path>, arch: Option<&str>, all: bool, with_classifier: bool, macs: bool) -> Result<ExitCode> {
    let bases: Vec<ArchSpec> = if all {
        let mut v = vec![ArchSpec::alexnet(Variant::Vanilla, 1000)];
        v.extend(RESNET_DEPTHS.iter().filter(|&&d| d >= 18).map(|&d| ArchSpec::resnet(d, Variant::Vanilla, 1000)));
        v
    } else if let Some(name) = arch {
        vec![parse_arch_name(name)?]
    } else if let Some(path) = config {
        let mut cfg = Config::load(path)?;
        if !cfg.contains("variant") {
            cfg.set("variant", "vanilla");
        }
        vec![ArchSpec::from_config(&cfg)?]
    } else {
        bail!("give --config, --arch or --all");
    };
    let label = if with_classifier { "with classifier" } else { "classifier excluded" };
    println!("# parameters, {label}");
    print!("{:<10} {:<9} {:>12} {:>9}", "model", "variant", "params", "millions");
    if macs {
        print!(" {:>15}", "macs");
    }
    println!();
    for base in bases {
        for v in Variant::ALL {
            let spec = base.with_variant(v);
            let model: Model<f32> = build_topology(&spec)?;
            let n = model.count_params(with_classifier);
            print!("{:<10} {:<9} {:>12} {:>9.2}", spec.name(), v, n, n as f64 / 1e6);
            if macs {
                print!(" {:>15}", model.flop_count(spec.input_size)?);
            }
            println!();
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn grad_check_cmd(layer: &str, cfg: &GradCheckConfig, tol: f64) -> Result<ExitCode> {
    let targets: Vec<CheckTarget> = if layer == "all" {
        CheckTarget::ALL.to_vec()
    } else {
        vec![layer.parse()?]
    };
    let mut ok = true;
    for t in targets {
        let r = grad_check(t, cfg)?;
        let pass = r.passed(tol);
        ok &= pass;
        println!(
            "{:<13} max relative error {:.3e} over {} entries (worst in {})  {}",
            t.to_string(),
            r.max_rel_error,
            r.checked,
            r.worst,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Trains `model` and writes metrics plus best/last checkpoints to `out`.
fn run_training(model: &mut Model<f32>, s: &Settings, data: &Path, out: &Path, norms: bool) -> Result<()> {
    let train_set = load_dataset(data, Split::Train)?;
    let val_set = match load_dataset(data, Split::Eval) {
        Ok(v) => Some(v),
        Err(e) if !data.join(Split::Eval.dir_name()).exists() => {
            eprintln!("warning: no validation split ({e})");
            None
        }
        Err(e) => return Err(e.into()),
    };
    if train_set.num_classes() != model.num_classes() {
        bail!(
            "dataset has {} classes, model has {}",
            train_set.num_classes(),
            model.num_classes()
        );
    }
    fs::create_dir_all(out)?;
    let mut state = OptimState::default();
    let opts = FitOptions {
        seed: s.seed,
        wall_clock: s.wall_clock,
        start_epoch: 0,
    };
    let mut best: Option<(usize, f64)> = None;
    let mut norm_rows = String::from("epoch,feature_norm,classifier_norm\n");
    if norms {
        let (f, c) = parameter_norms(model);
        norm_rows.push_str(&format!("init,{f},{c}\n"));
    }
    println!("{}", msshare_core::train::METRICS_HEADER);
    let records = fit(model, &train_set, val_set.as_ref(), &s.pre, &s.sgd, &mut state, &opts, |rec, m| {
        println!("{}", rec.csv_row());
        if norms {
            let (f, c) = parameter_norms(m);
            norm_rows.push_str(&format!("{},{f},{c}\n", rec.epoch));
        }
        let score = rec.val_top1.unwrap_or(rec.train_top1);
        if best.is_none_or(|(_, b)| score < b) {
            best = Some((rec.epoch, score));
            save_checkpoint(&out.join("best.ckpt"), m, None)?;
        }
        Ok(())
    })?;
    save_checkpoint(&out.join("last.ckpt"), model, Some(&state))?;
    write_text(&out.join("metrics.csv"), &metrics_csv(&records))?;
    if norms {
        write_text(&out.join("param_norms.csv"), &norm_rows)?;
    }
    let train_eval = evaluate(model, &train_set, &s.pre, s.eval_batch)?;
    println!("final train Top-1 error: {:.2}", train_eval.top1_error);
    if let Some((epoch, e)) = best {
        println!("best epoch {epoch} with top-1 error {e:.2}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn train(args: &RunArgs) -> Result<()> {
    let s = args.settings()?;
    let spec = s.arch()?;
    let mut model = build_model(&spec, s.seed)?;
    println!(
        "{spec}: {} parameters (classifier excluded)",
        model.count_params(false)
    );
    run_training(&mut model, &s, &s.data_root(args.data.as_ref())?, &s.out_dir(args.out.as_ref()), false)
}

fn format_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"))
}

fn eval(checkpoint: &Path, args: &RunArgs, split: &str) -> Result<()> {
    let s = args.settings()?;
    let (mut model, _) = load_checkpoint(checkpoint)?;
    let root = s.data_root(args.data.as_ref())?;
    let data = msshare_core::data::load_class_dirs(&root.join(split), Split::Eval)?;
    let e = evaluate(&mut model, &data, &s.pre, s.eval_batch)?;
    println!("{} samples", e.samples);
    println!("Top-1: {}  Top-5: {}", format_pct(Some(e.top1_error)), format_pct(e.top5_error));
    Ok(())
}

fn finetune(checkpoint: &Path, freeze: bool, args: &RunArgs) -> Result<()> {
    let s = args.settings()?;
    let (mut model, _) = load_checkpoint(checkpoint)?;
    let root = s.data_root(args.data.as_ref())?;
    let classes = match s.raw.parse_opt::<usize>("classes")? {
        Some(c) => c,
        None => load_dataset(&root, Split::Train)?.num_classes(),
    };
    finetune_prepare(&mut model, classes, freeze, s.seed)?;
    println!(
        "{}: new {classes}-way classifier, features {}",
        model.spec,
        if freeze { "frozen" } else { "trainable" }
    );
    run_training(&mut model, &s, &root, &s.out_dir(args.out.as_ref()), true)
}

fn viz(checkpoint: &Path, layer: Option<&str>, count: usize, aggregate: &str, out: &Path) -> Result<()> {
    let agg: Aggregate = aggregate.parse()?;
    let (model, _) = load_checkpoint(checkpoint)?;
    let layer = match layer {
        Some(l) => l.to_string(),
        None => model.last_spatial_conv().context("model has no spatial convolution")?,
    };
    let kernels = model.conv_kernels(&layer)?;
    let available = kernels.shape().n;
    if available < count {
        eprintln!("warning: {layer} has {available} kernels, fewer than {count}; using all");
    }
    let ranking = rank_kernels(&layer, &kernels, agg, count);
    let grid = kernel_grid(&kernels, &ranking.indices());
    fs::create_dir_all(out)?;
    grid.save_pgm(&out.join("kernels.pgm"))?;
    write_text(&out.join("ranking.csv"), &ranking.to_csv())?;
    let side = (ranking.entries.len() as f64).sqrt().ceil() as usize;
    println!(
        "{layer}: {} of {available} kernels ranked by {agg} norm, {side}x{side} grid of {}x{} tiles ({}x{} px)",
        ranking.entries.len(),
        kernels.shape().h,
        kernels.shape().w,
        grid.width,
        grid.height
    );
    println!("wrote {}", out.display());
    Ok(())
}

//! Command-line surface. Four subcommands cover the experiment matrix:
//!
//! * `train <config.json>` - run a config end to end, leaving checkpoints,
//!   a training log, the resolved config, and a manifest in the output dir
//! * `sample <checkpoint>` - draw samples (CSV for 2-D data, PGM for
//!   images), optionally class- or mask-conditioned, optionally dumping
//!   solver trajectories
//! * `eval <checkpoints...>` - score checkpoints across step counts and
//!   metrics into a comparison CSV plus per-checkpoint reports, with pixel
//!   KDE curves for image data
//! * `denoise <checkpoint>` - push noisy images through a denoise-mode
//!   checkpoint and report per-image PSNR/SSIM/SNR against the clean originals
//!
//! Exit codes: 0 success, 1 configuration or validation error, 2 runtime
//! failure. Commands that take no config file accept `--out-dir`, falling
//! back to the `FLOWLAB_OUT` environment variable. Every command writes a
//! `manifest.json` tying its outputs to config and checkpoint digests and
//! the code version.

use crate::config::{Manifest, ResolvedRun, RunConfig, MODEL_INIT_DOMAIN, OUTPUT_ROOT_ENV};
use crate::datasets::{
    add_speckle, dump_images, dump_toy2d, load_images, pixel_kde, read_pgm, Dataset, Toy2d,
};
use crate::digest::{file_sha256_hex, sha256_hex};
use crate::error::{Error, Result};
use crate::metrics::{psnr, silverman_bandwidth, snr, ssim};
use crate::models::{
    load_checkpoint, Condition, ConditionBatch, ConditionedModel, LoadedCheckpoint,
};
use crate::numerics::{mix_seed, Tensor};
use crate::paths::{PathKind, TrainMode};
use crate::samplers::{initial_noise, run_sampler, SamplerConfig, SamplerFamily};
use crate::training::{evaluate, train, EvalOptions, MetricKind, TrainOptions};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

/// Domain tag for deterministic speckle corruption in `denoise`.
const SPECKLE_DOMAIN: u64 = 0x77;

#[derive(Parser)]
#[command(
    name = "flowlab",
    version,
    about = "Flow-matching and diffusion experiments on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a run config and write checkpoints plus logs.
    Train {
        /// Path to a RunConfig JSON document.
        config: PathBuf,
    },
    /// Generate samples from a checkpoint.
    Sample {
        checkpoint: PathBuf,
        /// Sampler family: euler, heun, ddpm_ancestral, ddim.
        #[arg(long, default_value = "euler")]
        family: String,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of samples to draw.
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Condition every sample on this class index.
        #[arg(long)]
        class: Option<usize>,
        /// Condition every sample on this mask (a PGM file).
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Also write the solver trajectories as CSV.
        #[arg(long)]
        trajectories: bool,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Compare checkpoints across step counts and metrics.
    Eval {
        /// One or more checkpoint files.
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        /// Reference dataset: a toy CSV file or an image directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Or regenerate one: "eight_gaussians:400", "phantoms:200:16".
        #[arg(long = "gen")]
        gen_spec: Option<String>,
        /// Seed for --gen regeneration.
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "1,10,50")]
        steps: Vec<usize>,
        /// Metrics: mmd2, sliced_wasserstein, intensity_shift, mask_ssim.
        #[arg(long, value_delimiter = ',', default_value = "mmd2,sliced_wasserstein")]
        metrics: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Samples per sampler config; defaults to the validation size.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value_t = 64)]
        projections: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Denoise images with a denoise-mode checkpoint and score the result.
    Denoise {
        checkpoint: PathBuf,
        /// Clean reference images: a directory written by this crate.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Or regenerate phantoms: "phantoms:200:16" (validation split used).
        #[arg(long = "gen")]
        gen_spec: Option<String>,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        /// Directory of precorrupted noisy images matching the clean set.
        #[arg(long)]
        noisy: Option<PathBuf>,
        /// Or corrupt the clean images with speckle of this power.
        #[arg(long)]
        noise_power: Option<f64>,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// Sampler family (flow families only): euler or heun.
        #[arg(long, default_value = "euler")]
        family: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

/// Parses argv and dispatches; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let kind = e.kind();
            let _ = e.print();
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                0
            } else {
                1
            };
        }
    };
    let result = match cli.cmd {
        Cmd::Train { config } => cmd_train(&config),
        Cmd::Sample {
            checkpoint,
            family,
            steps,
            seed,
            count,
            class,
            mask,
            trajectories,
            out_dir,
        } => cmd_sample(SampleArgs {
            checkpoint,
            family,
            steps,
            seed,
            count,
            class,
            mask,
            trajectories,
            out_dir,
        }),
        Cmd::Eval {
            checkpoints,
            data,
            gen_spec,
            data_seed,
            steps,
            metrics,
            seed,
            count,
            projections,
            out_dir,
        } => cmd_eval(EvalArgs {
            checkpoints,
            data,
            gen_spec,
            data_seed,
            steps,
            metrics,
            seed,
            count,
            projections,
            out_dir,
        }),
        Cmd::Denoise {
            checkpoint,
            data,
            gen_spec,
            data_seed,
            noisy,
            noise_power,
            steps,
            family,
            seed,
            out_dir,
        } => cmd_denoise(DenoiseArgs {
            checkpoint,
            data,
            gen_spec,
            data_seed,
            noisy,
            noise_power,
            steps,
            family,
            seed,
            out_dir,
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

// ---- shared plumbing ----

fn resolve_out_dir(flag: Option<PathBuf>) -> Result<PathBuf> {
    match flag {
        Some(dir) => Ok(dir),
        None => match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) => Ok(PathBuf::from(root)),
            None => Err(Error::Config(format!(
                "--out-dir is unset and the {OUTPUT_ROOT_ENV} environment variable \
                 is not defined"
            ))),
        },
    }
}

fn checkpoint_stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("checkpoint")
        .to_string()
}

/// Splits a `[n, ...]` batch back into per-sample tensors.
fn unstack(batch: &Tensor) -> Result<Vec<Tensor>> {
    if batch.rank() < 2 {
        return Err(Error::BadShape {
            op: "unstack",
            expected: "a batched tensor [n, ...]",
            got: batch.shape().to_vec(),
        });
    }
    let n = batch.shape()[0];
    let sample_shape: Vec<usize> = batch.shape()[1..].to_vec();
    let per: usize = sample_shape.iter().product();
    (0..n)
        .map(|i| Tensor::new(sample_shape.clone(), batch.data()[i * per..(i + 1) * per].to_vec()))
        .collect()
}

/// Dataset source shared by eval and denoise: files on disk or a generator
/// spec like "eight_gaussians:400" / "phantoms:200:16".
fn load_reference(
    data: Option<&Path>,
    gen_spec: Option<&str>,
    data_seed: u64,
) -> Result<(Dataset, String)> {
    match (data, gen_spec) {
        (Some(_), Some(_)) => Err(Error::Config(
            "--data and --gen are mutually exclusive".into(),
        )),
        (Some(path), None) => {
            let ds = if path.extension().is_some_and(|e| e == "csv") {
                let name = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("toy2d")
                    .to_string();
                crate::datasets::load_toy2d(path, &name)?
            } else {
                load_images(path)?
            };
            Ok((ds, format!("files:{}", path.display())))
        }
        (None, Some(spec)) => {
            let ds = parse_gen_spec(spec, data_seed)?;
            Ok((ds, format!("gen:{spec}@{data_seed}")))
        }
        (None, None) => Err(Error::Config(
            "a reference dataset is required: pass --data or --gen".into(),
        )),
    }
}

fn parse_gen_spec(spec: &str, seed: u64) -> Result<Dataset> {
    let parts: Vec<&str> = spec.split(':').collect();
    let parse_n = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Config(format!("bad count `{s}` in --gen spec `{spec}`")))
    };
    match parts.as_slice() {
        [name, n] => {
            let variant = match *name {
                "eight_gaussians" => Toy2d::EightGaussians,
                "two_moons" => Toy2d::TwoMoons,
                "checkerboard" => Toy2d::Checkerboard,
                "phantoms" => return crate::datasets::gen_phantoms(parse_n(n)?, 16, seed),
                other => {
                    return Err(Error::Config(format!(
                        "unknown generator `{other}`; expected eight_gaussians, two_moons, \
                         checkerboard, or phantoms"
                    )))
                }
            };
            crate::datasets::gen_toy2d(variant, parse_n(n)?, seed)
        }
        ["phantoms", n, size] => {
            let size = size
                .parse()
                .map_err(|_| Error::Config(format!("bad size in --gen spec `{spec}`")))?;
            crate::datasets::gen_phantoms(parse_n(n)?, size, seed)
        }
        _ => Err(Error::Config(format!(
            "cannot parse --gen spec `{spec}`; expected name:count or phantoms:count:size"
        ))),
    }
}

/// Default comparison family for a path: flow checkpoints integrate with
/// Euler, diffusion checkpoints use deterministic DDIM.
fn default_family(kind: PathKind) -> SamplerFamily {
    match kind {
        PathKind::LinearOt => SamplerFamily::Euler,
        PathKind::VpDiffusion => SamplerFamily::Ddim,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---- train ----

fn cmd_train(config_path: &Path) -> Result<()> {
    let resolved: ResolvedRun = RunConfig::load(config_path)?.resolve()?;
    let config_digest = resolved.write_resolved()?;

    let model_seed = mix_seed(resolved.train.seed, MODEL_INIT_DOMAIN);
    let model = ConditionedModel::init(resolved.model.clone(), model_seed)?;

    let mut extra = BTreeMap::new();
    extra.insert(
        "config_digest".to_string(),
        serde_json::Value::String(config_digest.clone()),
    );
    let options = TrainOptions {
        out_dir: Some(resolved.output_dir.clone()),
        extra,
    };
    let outcome = train(&resolved.dataset, model, &resolved.train, &options)?;
    outcome
        .log
        .write_jsonl_file(&resolved.output_dir.join("train_log.jsonl"))?;

    let mut manifest = Manifest::new("train", config_digest, resolved.train.seed);
    for name in outcome.log.epochs.iter().filter_map(|e| e.checkpoint.as_ref()) {
        let digest = file_sha256_hex(&resolved.output_dir.join(name))?;
        manifest.checkpoints.insert(name.clone(), digest);
    }
    manifest.write(&resolved.output_dir)?;

    let last = outcome.log.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {}; final mean loss {:.6}; outputs in {}",
        outcome.log.epochs.len(),
        resolved.dataset.name,
        last.mean_loss,
        resolved.output_dir.display()
    );
    Ok(())
}

// ---- sample ----

struct SampleArgs {
    checkpoint: PathBuf,
    family: String,
    steps: usize,
    seed: u64,
    count: usize,
    class: Option<usize>,
    mask: Option<PathBuf>,
    trajectories: bool,
    out_dir: Option<PathBuf>,
}

/// Effective flag set, serialized and digested for the manifest.
#[derive(Serialize)]
struct SampleInvocation<'a> {
    checkpoint: String,
    sampler: &'a SamplerConfig,
    count: usize,
    class: Option<usize>,
    mask: Option<String>,
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let out_dir = resolve_out_dir(args.out_dir)?;
    let LoadedCheckpoint { model, meta, .. } = load_checkpoint(&args.checkpoint)?;

    let family = SamplerFamily::from_name(&args.family)?;
    let mut sampler = SamplerConfig::new(family, args.steps, args.seed);
    if args.trajectories {
        sampler = sampler.with_trajectory();
    }
    sampler.validate()?;
    if args.count == 0 {
        return Err(Error::Config("--count must be at least 1".into()));
    }

    if args.class.is_some() && meta.model.num_classes.is_none() {
        return Err(Error::BadCondition(
            "--class given, but the checkpoint is not class-conditional".into(),
        ));
    }
    if let (Some(class), Some(num_classes)) = (args.class, meta.model.num_classes) {
        if class >= num_classes {
            return Err(Error::ClassOutOfRange {
                index: class,
                num_classes,
            });
        }
    }
    if args.mask.is_some() && !meta.model.mask_cond {
        return Err(Error::BadCondition(
            "--mask given, but the checkpoint is not mask-conditional".into(),
        ));
    }
    let mask = args.mask.as_deref().map(|p| load_mask(p, &meta.model)).transpose()?;

    let conds: Vec<Condition> = (0..args.count)
        .map(|_| Condition {
            class: args.class,
            mask: mask.clone(),
        })
        .collect();
    let cond_batch = ConditionBatch::from_conditions(&conds)?;

    let x_init = initial_noise(&meta.model.data_shape, args.count, args.seed)?;
    let out = run_sampler(&model, &meta.path, &sampler, &x_init, &cond_batch)?;

    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let samples = unstack(&out.samples)?;
    let labels = args.class.map(|c| vec![c; args.count]);
    let generated = Dataset::new(
        "samples".into(),
        meta.model.data_shape.clone(),
        samples,
        labels,
        None,
        meta.model.num_classes,
    )?;
    let written = if meta.model.data_shape.len() == 1 {
        let file = out_dir.join("samples.csv");
        dump_toy2d(&generated, &file)?;
        file
    } else {
        let dir = out_dir.join("samples");
        let mut generator = BTreeMap::new();
        generator.insert("sampler".to_string(), serde_json::to_value(&sampler)?);
        generator.insert(
            "checkpoint".to_string(),
            serde_json::Value::String(checkpoint_stem(&args.checkpoint)),
        );
        dump_images(&generated, &dir, generator)?;
        dir
    };
    if let Some(traj) = &out.trajectory {
        traj.write_csv_file(&out_dir.join("trajectories.csv"))?;
    }

    let invocation = SampleInvocation {
        checkpoint: checkpoint_stem(&args.checkpoint),
        sampler: &sampler,
        count: args.count,
        class: args.class,
        mask: args.mask.as_ref().map(|p| p.display().to_string()),
    };
    let config_digest = sha256_hex(&serde_json::to_vec(&invocation)?);
    Manifest::new("sample", config_digest, args.seed)
        .with_checkpoint(
            &checkpoint_stem(&args.checkpoint),
            file_sha256_hex(&args.checkpoint)?,
        )
        .write(&out_dir)?;

    println!(
        "wrote {} samples ({} @ {} steps) to {}",
        args.count,
        family.name(),
        args.steps,
        written.display()
    );
    Ok(())
}

/// Reads a conditioning mask PGM at the checkpoint's expected resolution and
/// binarizes it.
fn load_mask(path: &Path, model: &crate::models::ModelConfig) -> Result<Tensor> {
    let shape = model.mask_shape()?;
    let (h, w) = match shape.as_slice() {
        [1, h, w] => (*h, *w),
        other => {
            return Err(Error::BadCondition(format!(
                "mask conditioning expects a [1, h, w] shape, model wants {other:?}"
            )))
        }
    };
    let pixels = read_pgm(path, w, h)?;
    let binary: Vec<f64> = pixels
        .iter()
        .map(|&p| if p > 0.5 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(shape, binary)
}

// ---- eval ----

struct EvalArgs {
    checkpoints: Vec<PathBuf>,
    data: Option<PathBuf>,
    gen_spec: Option<String>,
    data_seed: u64,
    steps: Vec<usize>,
    metrics: Vec<String>,
    seed: u64,
    count: Option<usize>,
    projections: usize,
    out_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalInvocation<'a> {
    checkpoints: Vec<String>,
    dataset: &'a str,
    steps: &'a [usize],
    metrics: Vec<&'a str>,
    count: Option<usize>,
    projections: usize,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let out_dir = resolve_out_dir(args.out_dir)?;
    if args.steps.is_empty() {
        return Err(Error::Config("--steps needs at least one entry".into()));
    }
    let metrics: Vec<MetricKind> = args
        .metrics
        .iter()
        .map(|m| MetricKind::from_name(m))
        .collect::<Result<_>>()?;
    let (dataset, dataset_ref) =
        load_reference(args.data.as_deref(), args.gen_spec.as_deref(), args.data_seed)?;

    let opts = EvalOptions {
        num_samples: args.count,
        num_projections: args.projections,
        seed: args.seed,
        ..EvalOptions::default()
    };

    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut combined = String::from("checkpoint,metric,value,n_real,n_generated,config_digest\n");
    let mut manifest = Manifest::new(
        "eval",
        sha256_hex(&serde_json::to_vec(&EvalInvocation {
            checkpoints: args.checkpoints.iter().map(|p| checkpoint_stem(p)).collect(),
            dataset: &dataset_ref,
            steps: &args.steps,
            metrics: metrics.iter().map(|m| m.name()).collect(),
            count: args.count,
            projections: args.projections,
        })?),
        args.seed,
    );

    for ckpt_path in &args.checkpoints {
        let LoadedCheckpoint { model, meta, .. } = load_checkpoint(ckpt_path)?;
        let stem = checkpoint_stem(ckpt_path);
        let digest = file_sha256_hex(ckpt_path)?;
        let family = default_family(meta.path.kind);
        let samplers: Vec<SamplerConfig> = args
            .steps
            .iter()
            .map(|&s| SamplerConfig::new(family, s, args.seed))
            .collect();

        let checkpoint_ref = format!("{stem}@sha256:{digest}");
        let report = evaluate(
            &model,
            &meta.path,
            &dataset,
            &samplers,
            &metrics,
            &checkpoint_ref,
            &opts,
        )?;
        report.write_json_file(&out_dir.join(format!("eval_{stem}.json")))?;
        for entry in &report.entries {
            combined.push_str(&format!(
                "{stem},{},{},{},{},{}\n",
                entry.name, entry.value, entry.n_real, entry.n_generated, entry.config_digest
            ));
        }

        if dataset.data_shape.len() > 1 {
            write_kde_curves(
                &out_dir.join(format!("kde_{stem}.csv")),
                &dataset,
                &model,
                &meta,
                &samplers,
                &opts,
            )?;
        }
        manifest.checkpoints.insert(stem, digest);
    }

    write_text(&out_dir.join("eval_report.csv"), &combined)?;
    manifest.write(&out_dir)?;
    println!(
        "evaluated {} checkpoint(s) x {} step count(s) x {} metric(s); report in {}",
        args.checkpoints.len(),
        args.steps.len(),
        metrics.len(),
        out_dir.join("eval_report.csv").display()
    );
    Ok(())
}

/// Pixel-intensity KDE curves (grid, real density, generated density) for
/// one checkpoint, generated at the largest requested step count. The grid
/// spans both populations plus four bandwidths of margin, so each curve's
/// trapezoid integral is ~1.
fn write_kde_curves(
    file: &Path,
    dataset: &Dataset,
    model: &ConditionedModel,
    meta: &crate::models::CheckpointMeta,
    samplers: &[SamplerConfig],
    opts: &EvalOptions,
) -> Result<()> {
    let best = samplers
        .iter()
        .max_by_key(|sc| sc.steps)
        .expect("samplers nonempty");
    let val = dataset.val_split()?;
    let n = opts.num_samples.unwrap_or(val.len());
    let conds: Vec<Condition> = (0..n)
        .map(|i| {
            let idx = i % val.len();
            Condition {
                class: if model.config().num_classes.is_some() {
                    val.label(idx)
                } else {
                    None
                },
                mask: if model.config().mask_cond {
                    val.mask(idx).cloned()
                } else {
                    None
                },
            }
        })
        .collect();
    let cond_batch = ConditionBatch::from_conditions(&conds)?;
    let x_init = initial_noise(&dataset.data_shape, n, best.seed)?;
    let generated = run_sampler(model, &meta.path, best, &x_init, &cond_batch)?.samples;

    let real = val.stacked()?;
    let bandwidth = silverman_bandwidth(real.data());
    let lo = real
        .data()
        .iter()
        .chain(generated.data())
        .fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = real
        .data()
        .iter()
        .chain(generated.data())
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let (lo, hi) = (lo - 4.0 * bandwidth, hi + 4.0 * bandwidth);
    let points = 257;
    let grid: Vec<f64> = (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect();

    let real_density = pixel_kde(&[real], &grid, bandwidth)?;
    let gen_density = pixel_kde(&[generated], &grid, bandwidth)?;

    let out = std::fs::File::create(file).map_err(|e| Error::io(file, e))?;
    let mut w = std::io::BufWriter::new(out);
    writeln!(w, "grid,real_density,generated_density").map_err(|e| Error::io(file, e))?;
    for ((g, r), d) in grid.iter().zip(&real_density).zip(&gen_density) {
        writeln!(w, "{g},{r},{d}").map_err(|e| Error::io(file, e))?;
    }
    w.flush().map_err(|e| Error::io(file, e))
}

// ---- denoise ----

struct DenoiseArgs {
    checkpoint: PathBuf,
    data: Option<PathBuf>,
    gen_spec: Option<String>,
    data_seed: u64,
    noisy: Option<PathBuf>,
    noise_power: Option<f64>,
    steps: usize,
    family: String,
    seed: u64,
    out_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct DenoiseInvocation<'a> {
    checkpoint: String,
    dataset: &'a str,
    noisy: Option<String>,
    noise_power: Option<f64>,
    steps: usize,
    family: &'a str,
}

fn cmd_denoise(args: DenoiseArgs) -> Result<()> {
    let out_dir = resolve_out_dir(args.out_dir)?;
    let LoadedCheckpoint { model, meta, .. } = load_checkpoint(&args.checkpoint)?;
    if meta.mode != TrainMode::Denoise {
        return Err(Error::InvalidTrainConfig(
            "denoise needs a checkpoint trained in denoise mode; this one generates \
             from noise"
                .into(),
        ));
    }
    let family = SamplerFamily::from_name(&args.family)?;
    if !family.is_flow() {
        return Err(Error::Config(format!(
            "denoising integrates the learned transport; use a flow family \
             (euler or heun), not {}",
            family.name()
        )));
    }

    let (clean_full, dataset_ref) =
        load_reference(args.data.as_deref(), args.gen_spec.as_deref(), args.data_seed)?;
    // Generator specs evaluate on the validation split; explicit files are
    // taken as-is.
    let clean = if args.gen_spec.is_some() {
        clean_full.val_split()?
    } else {
        clean_full
    };
    if clean.data_shape != meta.model.data_shape {
        return Err(Error::Config(format!(
            "checkpoint expects {:?} images, dataset provides {:?}",
            meta.model.data_shape, clean.data_shape
        )));
    }

    let noisy: Vec<Tensor> = match (&args.noisy, args.noise_power) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "--noisy and --noise-power are mutually exclusive".into(),
            ))
        }
        (Some(dir), None) => {
            let ds = load_images(dir)?;
            if ds.data_shape != clean.data_shape || ds.len() != clean.len() {
                return Err(Error::Config(format!(
                    "noisy set ({} images of {:?}) does not match the clean set \
                     ({} images of {:?})",
                    ds.len(),
                    ds.data_shape,
                    clean.len(),
                    clean.data_shape
                )));
            }
            ds.samples().to_vec()
        }
        (None, Some(power)) => {
            let base = mix_seed(args.seed, SPECKLE_DOMAIN);
            clean
                .samples()
                .iter()
                .enumerate()
                .map(|(i, img)| {
                    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(base, i as u64));
                    Ok(add_speckle(img, power, &mut rng)?.noisy)
                })
                .collect::<Result<_>>()?
        }
        (None, None) => {
            return Err(Error::Config(
                "pass --noisy DIR or --noise-power P to define the corrupted input".into(),
            ))
        }
    };

    let x_init = Tensor::stack(&noisy)?;
    let sampler = SamplerConfig::new(family, args.steps, args.seed);
    let cond = ConditionBatch::unconditional(clean.len());
    let out = run_sampler(&model, &meta.path, &sampler, &x_init, &cond)?;
    // The transport can overshoot the image range slightly; metrics and the
    // PGM writer both operate on [0, 1].
    let denoised: Vec<Tensor> = unstack(&out.samples)?
        .into_iter()
        .map(|t| {
            let clamped: Vec<f64> = t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
            Tensor::new(t.shape().to_vec(), clamped)
        })
        .collect::<Result<_>>()?;

    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut csv = String::from(
        "image,psnr_noisy,ssim_noisy,snr_noisy,psnr_denoised,ssim_denoised,snr_denoised\n",
    );
    let window = 7;
    let mut mean_gain = 0.0;
    for (i, den) in denoised.iter().enumerate() {
        let clean_img = clean.sample(i);
        let noisy_img = &noisy[i];
        let pn = psnr(clean_img, noisy_img)?;
        let sn = ssim(noisy_img, clean_img, window)?;
        let rn = snr(clean_img, noisy_img)?;
        let pd = psnr(clean_img, den)?;
        let sd = ssim(den, clean_img, window)?;
        let rd = snr(clean_img, den)?;
        mean_gain += pd - pn;
        csv.push_str(&format!("{i:04},{pn},{sn},{rn},{pd},{sd},{rd}\n"));
    }
    mean_gain /= denoised.len() as f64;
    write_text(&out_dir.join("denoise_metrics.csv"), &csv)?;

    let denoised_ds = Dataset::new(
        "denoised".into(),
        clean.data_shape.clone(),
        denoised,
        None,
        None,
        None,
    )?;
    let mut generator = BTreeMap::new();
    generator.insert("sampler".to_string(), serde_json::to_value(&sampler)?);
    generator.insert(
        "checkpoint".to_string(),
        serde_json::Value::String(checkpoint_stem(&args.checkpoint)),
    );
    dump_images(&denoised_ds, &out_dir.join("denoised"), generator)?;

    let invocation = DenoiseInvocation {
        checkpoint: checkpoint_stem(&args.checkpoint),
        dataset: &dataset_ref,
        noisy: args.noisy.as_ref().map(|p| p.display().to_string()),
        noise_power: args.noise_power,
        steps: args.steps,
        family: family.name(),
    };
    Manifest::new("denoise", sha256_hex(&serde_json::to_vec(&invocation)?), args.seed)
        .with_checkpoint(
            &checkpoint_stem(&args.checkpoint),
            file_sha256_hex(&args.checkpoint)?,
        )
        .write(&out_dir)?;

    println!(
        "denoised {} images in {} steps; mean PSNR gain {:.2} dB; metrics in {}",
        denoised_ds.len(),
        args.steps,
        mean_gain,
        out_dir.join("denoise_metrics.csv").display()
    );
    Ok(())
}

//! Deterministic training and evaluation: Adam over the path losses, seeded
//! per-epoch shuffling, condition dropout, checkpoint emission, and an
//! evaluation harness that turns a trained model plus sampler configs into
//! an [`EvalReport`].
//!
//! Determinism is structured so that resuming is exact: every epoch draws
//! from its own rng stream keyed by `mix_seed(mix_seed(seed, SHUFFLE_DOMAIN),
//! epoch)`, so epoch `k` produces the same batches and noise whether the run
//! started at epoch 0 or resumed from a checkpoint at epoch `k`. Together
//! with checkpointed optimizer moments this makes "train 2N" and "train N,
//! resume N" bit-identical.

use crate::datasets::{Dataset, PHANTOM_MASK_THRESHOLD};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::metrics::{
    intensity_shift, mmd2, sliced_wasserstein, ssim, EvalReport, KernelSpec, MetricEntry,
    Provenance,
};
use crate::models::{
    save_checkpoint, CheckpointMeta, Condition, ConditionBatch, ConditionedModel,
    LoadedCheckpoint, OptimizerMeta,
};
use crate::numerics::{mix_seed, Tape, Tensor};
use crate::paths::{
    diffusion_loss_terms, fm_loss_terms, NoiseSchedule, PairSampler, PathKind, PathSpec,
    TrainMode, TrainingPair,
};
use crate::samplers::{initial_noise, run_sampler, SamplerConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Probability that an attached condition channel is dropped during
/// training, so one checkpoint serves conditional and unconditional
/// sampling.
pub const CONDITION_DROPOUT: f64 = 0.1;

/// Domain tag separating shuffle streams from the samplers' noise streams.
const SHUFFLE_DOMAIN: u64 = 0x33;
/// Domain tag for evaluation-time projection seeds.
const EVAL_DOMAIN: u64 = 0x44;

// ---- Adam ----

/// Adam hyperparameters. Plain Adam: no weight decay, no schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidTrainConfig(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidTrainConfig(format!(
                    "{name} must be in [0, 1), got {b}"
                )));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::InvalidTrainConfig(format!(
                "adam eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// First and second moment buffers plus the step count that drives bias
/// correction. Checkpointing this is what makes resume exact.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// Rebuilds state from checkpointed moments.
    pub fn from_moments(m: Vec<f64>, v: Vec<f64>, step: u64) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::InvalidTrainConfig(format!(
                "moment buffers disagree: {} vs {} values",
                m.len(),
                v.len()
            )));
        }
        Ok(Self { m, v, step })
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }
}

/// One Adam update in place. Standard bias-corrected Adam; a zero gradient
/// on fresh state leaves `params` unchanged while still advancing the step
/// count.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<()> {
    hp.validate()?;
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::InvalidTrainConfig(format!(
            "adam_step saw {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - hp.beta1.powf(t);
    let bc2 = 1.0 - hp.beta2.powf(t);
    for i in 0..params.len() {
        let g = grads[i];
        if !g.is_finite() {
            return Err(Error::NonFinite {
                op: "adam_step",
                context: Some(format!("gradient element {i} is {g}")),
            });
        }
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        if !state.v[i].is_finite() {
            return Err(Error::NonFinite {
                op: "adam_step",
                context: Some(format!("second moment overflowed at element {i}")),
            });
        }
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        if !params[i].is_finite() {
            return Err(Error::NonFinite {
                op: "adam_step",
                context: Some(format!("parameter {i} became non-finite")),
            });
        }
    }
    Ok(())
}

// ---- configuration ----

/// Which condition channels training attaches (before dropout).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    #[default]
    None,
    Class,
    Mask,
    #[serde(rename = "class+mask")]
    ClassMask,
}

impl Conditioning {
    pub fn wants_class(&self) -> bool {
        matches!(self, Conditioning::Class | Conditioning::ClassMask)
    }

    pub fn wants_mask(&self) -> bool {
        matches!(self, Conditioning::Mask | Conditioning::ClassMask)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Conditioning::None => "none",
            Conditioning::Class => "class",
            Conditioning::Mask => "mask",
            Conditioning::ClassMask => "class+mask",
        }
    }
}

fn default_lr() -> f64 {
    1e-4
}
fn default_epochs() -> usize {
    200
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_noise_power() -> f64 {
    0.1
}
fn default_mode() -> TrainMode {
    TrainMode::Generate
}

/// Everything a training run needs besides the data and the network.
/// `batch_size` left unset resolves per dataset: 128 for vector data, 32 for
/// images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub path: PathSpec,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub conditioning: Conditioning,
    #[serde(default = "default_mode")]
    pub mode: TrainMode,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Speckle power for denoise-mode corruption; unused when generating.
    #[serde(default = "default_noise_power")]
    pub noise_power: f64,
    /// Also checkpoint every K epochs; the final epoch always checkpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
}

impl TrainConfig {
    /// Generation on the given path with all defaults.
    pub fn new(path: PathSpec) -> Self {
        Self {
            path,
            lr: default_lr(),
            epochs: default_epochs(),
            batch_size: None,
            seed: 0,
            conditioning: Conditioning::None,
            mode: TrainMode::Generate,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            noise_power: default_noise_power(),
            checkpoint_every: None,
        }
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn resolved_batch_size(&self, dataset: &Dataset) -> usize {
        self.batch_size
            .unwrap_or(if dataset.data_shape.len() == 1 { 128 } else { 32 })
    }

    /// Checks the config against itself, the dataset, and the network.
    pub fn validate(&self, dataset: &Dataset, model: &crate::models::ModelConfig) -> Result<()> {
        self.path.validate()?;
        self.adam().validate()?;
        if self.epochs == 0 {
            return Err(Error::InvalidTrainConfig(
                "epochs must be at least 1".into(),
            ));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidTrainConfig(
                "batch_size must be at least 1".into(),
            ));
        }
        if let Some(0) = self.checkpoint_every {
            return Err(Error::InvalidTrainConfig(
                "checkpoint_every must be at least 1".into(),
            ));
        }
        if self.mode == TrainMode::Denoise {
            if self.path.kind != PathKind::LinearOt {
                return Err(Error::InvalidTrainConfig(
                    "denoise mode transports noisy to clean along the linear OT path; \
                     it is incompatible with vp_diffusion"
                        .into(),
                ));
            }
            if !(self.noise_power.is_finite() && self.noise_power > 0.0) {
                return Err(Error::InvalidTrainConfig(format!(
                    "denoise mode needs a positive noise power, got {}",
                    self.noise_power
                )));
            }
        }
        if model.data_shape != dataset.data_shape {
            return Err(Error::InvalidTrainConfig(format!(
                "model expects data shape {:?}, dataset provides {:?}",
                model.data_shape, dataset.data_shape
            )));
        }
        if self.conditioning.wants_class() {
            if dataset.labels().is_none() {
                return Err(Error::InvalidTrainConfig(format!(
                    "conditioning `{}` needs labels, dataset `{}` has none",
                    self.conditioning.name(),
                    dataset.name
                )));
            }
            if model.num_classes.is_none() {
                return Err(Error::InvalidTrainConfig(
                    "class conditioning needs a model built with num_classes".into(),
                ));
            }
        }
        if self.conditioning.wants_mask() {
            if !dataset.has_masks() {
                return Err(Error::InvalidTrainConfig(format!(
                    "conditioning `{}` needs masks, dataset `{}` has none",
                    self.conditioning.name(),
                    dataset.name
                )));
            }
            if !model.mask_cond {
                return Err(Error::InvalidTrainConfig(
                    "mask conditioning needs a model built with mask_cond".into(),
                ));
            }
        }
        Ok(())
    }
}

// ---- training log ----

/// Run-level facts written once at the head of the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunHeader {
    pub path: PathKind,
    pub mode: TrainMode,
    pub conditioning: Conditioning,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Recipe notes, including deliberate omissions from the optimizer.
    pub notes: Vec<String>,
}

/// One epoch of training as recorded in the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_time_s: f64,
    /// Seed of this epoch's shuffle/noise stream; replaying it reproduces
    /// the batch order exactly.
    pub shuffle_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

/// Per-run training history. Serializes as JSON-lines: one header line, then
/// one record per epoch. Epochs are contiguous from the first record and all
/// losses are finite; both are enforced on push and on read.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub header: RunHeader,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn new(header: RunHeader) -> Self {
        Self {
            header,
            epochs: Vec::new(),
        }
    }

    pub fn push(&mut self, record: EpochRecord) -> Result<()> {
        let expected = match self.epochs.last() {
            Some(prev) => prev.epoch + 1,
            None => record.epoch,
        };
        if record.epoch != expected {
            return Err(Error::InvalidTrainConfig(format!(
                "log epochs must be contiguous: expected {expected}, got {}",
                record.epoch
            )));
        }
        if !record.mean_loss.is_finite() {
            return Err(Error::InvalidTrainConfig(format!(
                "log rejects non-finite loss {} at epoch {}",
                record.mean_loss, record.epoch
            )));
        }
        self.epochs.push(record);
        Ok(())
    }

    pub fn write_jsonl<W: IoWrite>(&self, mut out: W) -> Result<()> {
        let mut line = serde_json::to_string(&self.header)?;
        line.push('\n');
        out.write_all(line.as_bytes()).map_err(Error::from_io)?;
        for rec in &self.epochs {
            let mut line = serde_json::to_string(rec)?;
            line.push('\n');
            out.write_all(line.as_bytes()).map_err(Error::from_io)?;
        }
        Ok(())
    }

    pub fn write_jsonl_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let head = lines
            .next()
            .ok_or_else(|| Error::InvalidTrainConfig("empty training log".into()))?
            .map_err(Error::from_io)?;
        let header: RunHeader = serde_json::from_str(&head)?;
        let mut log = TrainLog::new(header);
        for line in lines {
            let line = line.map_err(Error::from_io)?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EpochRecord = serde_json::from_str(&line)?;
            log.push(rec)?;
        }
        Ok(log)
    }

    pub fn read_jsonl_file(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }
}

// ---- the loop ----

/// Where checkpoints go and what provenance they carry.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for checkpoint files; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Extra provenance merged into every checkpoint's metadata.
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// A finished run: the trained network, its log, and the optimizer state
/// (so callers can checkpoint or keep training).
pub struct TrainOutcome {
    pub model: ConditionedModel,
    pub log: TrainLog,
    pub adam: AdamState,
}

/// Trains `model` on `dataset` from scratch.
pub fn train(
    dataset: &Dataset,
    model: ConditionedModel,
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    let adam = AdamState::new(model.param_count());
    train_from(dataset, model, config, options, adam, 0)
}

/// Continues a checkpointed run up to `config.epochs` total epochs. The
/// checkpoint's path, mode, and seed must match the config; epoch streams
/// are keyed by epoch index, so the continuation reproduces exactly what an
/// uninterrupted run would have done.
pub fn resume(
    dataset: &Dataset,
    loaded: LoadedCheckpoint,
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    let LoadedCheckpoint { model, meta, moments } = loaded;
    if meta.path != config.path {
        return Err(Error::InvalidTrainConfig(
            "resume config changes the path; the checkpoint was trained on a different one"
                .into(),
        ));
    }
    if meta.mode != config.mode {
        return Err(Error::InvalidTrainConfig(
            "resume config changes the training mode".into(),
        ));
    }
    if meta.seed != config.seed {
        return Err(Error::InvalidTrainConfig(format!(
            "resume seed {} differs from checkpoint seed {}; continuation would not \
             reproduce the uninterrupted run",
            config.seed, meta.seed
        )));
    }
    if meta.epochs_completed >= config.epochs {
        return Err(Error::InvalidTrainConfig(format!(
            "checkpoint already covers {} epochs, config asks for {}",
            meta.epochs_completed, config.epochs
        )));
    }
    let adam = match (&meta.optimizer, moments) {
        (Some(opt), Some((m, v))) => AdamState::from_moments(m, v, opt.step)?,
        (None, None) => AdamState::new(model.param_count()),
        _ => {
            return Err(Error::CheckpointMismatch(
                "optimizer metadata and moment buffers must appear together".into(),
            ))
        }
    };
    train_from(dataset, model, config, options, adam, meta.epochs_completed)
}

fn train_from(
    dataset: &Dataset,
    mut model: ConditionedModel,
    config: &TrainConfig,
    options: &TrainOptions,
    mut adam: AdamState,
    start_epoch: usize,
) -> Result<TrainOutcome> {
    config.validate(dataset, model.config())?;
    if adam.len() != model.param_count() {
        return Err(Error::CheckpointMismatch(format!(
            "optimizer state holds {} values, model has {} parameters",
            adam.len(),
            model.param_count()
        )));
    }
    let sampler = PairSampler::new(dataset, &config.path, config.mode, config.noise_power)?;
    let schedule = config.path.build_schedule()?;
    let batch_size = config.resolved_batch_size(dataset);
    let hp = config.adam();

    let mut notes = vec![
        "optimizer: adam, no weight decay, no lr schedule, no gradient clipping".into(),
    ];
    if config.conditioning != Conditioning::None {
        notes.push(format!("condition dropout {CONDITION_DROPOUT}"));
    }
    let mut log = TrainLog::new(RunHeader {
        path: config.path.kind,
        mode: config.mode,
        conditioning: config.conditioning,
        epochs: config.epochs,
        batch_size,
        seed: config.seed,
        notes,
    });

    let mut extra = options.extra.clone();
    extra.insert("dataset".into(), serde_json::Value::String(dataset.name.clone()));
    if config.mode == TrainMode::Denoise {
        extra.insert("noise_power".into(), serde_json::json!(config.noise_power));
    }

    let order_base: Vec<usize> = (0..dataset.len()).collect();
    for epoch in start_epoch..config.epochs {
        let started = Instant::now();
        let shuffle_seed = mix_seed(mix_seed(config.seed, SHUFFLE_DOMAIN), epoch as u64);
        let mut rng = ChaCha12Rng::seed_from_u64(shuffle_seed);
        let mut order = order_base.clone();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(batch_size) {
            // Fixed draw order per sample: pair (time, source noise) first,
            // then dropout coins. Divergence keeps the offending position.
            let step_result = (|| -> Result<f64> {
                let mut pairs = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let mut p = sampler.pair_at(i, &mut rng)?;
                    p.cond = condition_policy(p.cond, config.conditioning, &mut rng);
                    pairs.push(p);
                }
                step_once(&mut model, &pairs, schedule.as_ref(), &mut adam, &hp)
            })();
            let loss = match step_result {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    return Err(Error::Diverged { epoch, step: steps })
                }
                Err(e) => return Err(e),
            };
            loss_sum += loss;
            steps += 1;
        }

        let epoch_done = epoch + 1;
        let last = epoch_done == config.epochs;
        let due = config.checkpoint_every.is_some_and(|k| epoch_done % k == 0);
        let checkpoint = match (&options.out_dir, last || due) {
            (Some(dir), true) => Some(write_checkpoint(
                dir, epoch_done, &model, &adam, config, &extra,
            )?),
            _ => None,
        };
        log.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / steps as f64,
            wall_time_s: started.elapsed().as_secs_f64(),
            shuffle_seed,
            checkpoint,
        })?;
    }

    Ok(TrainOutcome { model, log, adam })
}

/// Keeps only the channels `conditioning` enables, then drops each kept
/// channel with probability [`CONDITION_DROPOUT`]. Coins are drawn in a
/// fixed order (class, then mask) and only for enabled, present channels.
fn condition_policy<R: Rng + ?Sized>(
    cond: Condition,
    conditioning: Conditioning,
    rng: &mut R,
) -> Condition {
    let mut out = Condition::none();
    if conditioning.wants_class() {
        if let Some(class) = cond.class {
            if rng.gen::<f64>() >= CONDITION_DROPOUT {
                out.class = Some(class);
            }
        }
    }
    if conditioning.wants_mask() {
        if let Some(mask) = cond.mask {
            if rng.gen::<f64>() >= CONDITION_DROPOUT {
                out.mask = Some(mask);
            }
        }
    }
    out
}

/// One optimizer step: forward the batch loss, backpropagate, update the
/// flat parameter vector. Parameters a batch never touches (a dropped class
/// table, say) contribute zero gradient.
fn step_once(
    model: &mut ConditionedModel,
    pairs: &[TrainingPair],
    schedule: Option<&NoiseSchedule>,
    adam: &mut AdamState,
    hp: &AdamParams,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, grads) = {
        let bound = model.bind(&mut tape, true);
        let root = match schedule {
            None => fm_loss_terms(&mut tape, &bound, pairs)?,
            Some(s) => diffusion_loss_terms(&mut tape, &bound, pairs, s)?,
        };
        let loss = tape.value(root).item()?;
        tape.backward(root)?;
        let mut grads = Vec::with_capacity(model.param_count());
        for &var in bound.param_vars() {
            match tape.grad(var) {
                Some(g) => grads.extend_from_slice(g),
                None => grads.extend(std::iter::repeat(0.0).take(tape.value(var).len())),
            }
        }
        (loss, grads)
    };
    let mut params = model.flat_params();
    adam_step(&mut params, &grads, adam, hp)?;
    model.load_flat_params(&params)?;
    Ok(loss)
}

fn write_checkpoint(
    dir: &Path,
    epochs_completed: usize,
    model: &ConditionedModel,
    adam: &AdamState,
    config: &TrainConfig,
    extra: &BTreeMap<String, serde_json::Value>,
) -> Result<String> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = format!("checkpoint_{epochs_completed:04}.ckpt");
    let meta = CheckpointMeta {
        model: model.config().clone(),
        path: config.path.clone(),
        mode: config.mode,
        seed: config.seed,
        epochs_completed,
        params: Vec::new(),
        param_count: 0,
        optimizer: Some(OptimizerMeta {
            kind: "adam".into(),
            step: adam.step_count(),
        }),
        extra: extra.clone(),
    };
    let (m, v) = adam.moments();
    save_checkpoint(&dir.join(&name), model, meta, Some((m, v)))?;
    Ok(name)
}

// ---- evaluation ----

/// Distribution and image metrics the evaluation harness can compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Mmd2,
    SlicedWasserstein,
    IntensityShift,
    MaskSsim,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Mmd2 => "mmd2",
            MetricKind::SlicedWasserstein => "sliced_wasserstein",
            MetricKind::IntensityShift => "intensity_shift",
            MetricKind::MaskSsim => "mask_ssim",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "mmd2" => Ok(MetricKind::Mmd2),
            "sliced_wasserstein" => Ok(MetricKind::SlicedWasserstein),
            "intensity_shift" => Ok(MetricKind::IntensityShift),
            "mask_ssim" => Ok(MetricKind::MaskSsim),
            other => Err(Error::InvalidMetric(format!(
                "unknown metric `{other}`; expected one of mmd2, sliced_wasserstein, \
                 intensity_shift, mask_ssim"
            ))),
        }
    }
}

/// Evaluation knobs with sensible defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// How many samples to generate per sampler config; defaults to the
    /// validation split size.
    pub num_samples: Option<usize>,
    pub num_projections: usize,
    /// Seed for evaluation-side randomness (sliced Wasserstein projections).
    pub seed: u64,
    /// Intensity band for the KDE shift metric, inside [0, 1].
    pub intensity_band: [f64; 2],
    pub ssim_window: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            num_samples: None,
            num_projections: 64,
            seed: 0,
            intensity_band: [0.6, 1.0],
            ssim_window: 7,
        }
    }
}

/// Generates samples with each sampler config and scores them against the
/// dataset's validation split. Conditions (classes, masks) are drawn from
/// the validation split when the model supports them. Entry names read
/// `metric/family@steps`; the digest field identifies the sampler config.
pub fn evaluate(
    model: &ConditionedModel,
    path: &PathSpec,
    dataset: &Dataset,
    samplers: &[SamplerConfig],
    metrics: &[MetricKind],
    checkpoint_ref: &str,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if samplers.is_empty() {
        return Err(Error::InvalidSampler("evaluate needs at least one sampler".into()));
    }
    if metrics.is_empty() {
        return Err(Error::InvalidMetric("evaluate needs at least one metric".into()));
    }
    let val = dataset.val_split()?;
    let n = opts.num_samples.unwrap_or(val.len());
    if n == 0 {
        return Err(Error::InvalidMetric("evaluate needs at least one sample".into()));
    }
    let is_image = dataset.data_shape.len() > 1;
    for m in metrics {
        match m {
            MetricKind::IntensityShift if !is_image => {
                return Err(Error::InvalidMetric(
                    "intensity_shift applies to image datasets".into(),
                ))
            }
            MetricKind::MaskSsim if !(is_image && val.has_masks()) => {
                return Err(Error::InvalidMetric(
                    "mask_ssim needs an image dataset with masks".into(),
                ))
            }
            _ => {}
        }
    }

    // Conditions cycle through the validation split in order, so sample i is
    // paired with mask/class i mod |val| for conditional metrics.
    let want_class = model.config().num_classes.is_some() && val.labels().is_some();
    let want_mask = model.config().mask_cond && val.has_masks();
    let conds: Vec<Condition> = (0..n)
        .map(|i| {
            let idx = i % val.len();
            Condition {
                class: if want_class { val.label(idx) } else { None },
                mask: if want_mask { val.mask(idx).cloned() } else { None },
            }
        })
        .collect();
    let cond_batch = ConditionBatch::from_conditions(&conds)?;
    let real = val.stacked()?;

    let mut entries = Vec::with_capacity(samplers.len() * metrics.len());
    for sc in samplers {
        let x_init = initial_noise(&dataset.data_shape, n, sc.seed)?;
        let out = run_sampler(model, path, sc, &x_init, &cond_batch)?;
        let gen = out.samples;
        let digest = sha256_hex(&serde_json::to_vec(sc)?);
        for metric in metrics {
            let value = match metric {
                MetricKind::Mmd2 => {
                    let kernel = KernelSpec::median_heuristic(&real, &gen)?;
                    mmd2(&real, &gen, &kernel)?
                }
                MetricKind::SlicedWasserstein => sliced_wasserstein(
                    &real,
                    &gen,
                    opts.num_projections,
                    mix_seed(opts.seed, EVAL_DOMAIN),
                )?,
                MetricKind::IntensityShift => {
                    intensity_shift(&real, &gen, opts.intensity_band)?
                }
                MetricKind::MaskSsim => mask_ssim(&gen, &val, opts.ssim_window)?,
            };
            entries.push(MetricEntry {
                name: format!("{}/{}@{}", metric.name(), sc.family.name(), sc.steps),
                value,
                n_real: val.len(),
                n_generated: n,
                config_digest: digest.clone(),
            });
        }
    }

    Ok(EvalReport {
        provenance: Provenance {
            checkpoint: checkpoint_ref.to_string(),
            sampler: None,
            dataset: dataset.name.clone(),
        },
        entries,
    })
}

/// Mean SSIM between each generated image's extracted foreground and its
/// conditioning mask from the validation split. Extraction thresholds in
/// the intensity band the phantom generator leaves empty between background
/// and ellipse pixels, which recovers a clean phantom's mask exactly.
fn mask_ssim(gen: &Tensor, val: &Dataset, window: usize) -> Result<f64> {
    let n = gen.shape()[0];
    let sample_shape: Vec<usize> = gen.shape()[1..].to_vec();
    let per: usize = sample_shape.iter().product();
    let mut total = 0.0;
    for i in 0..n {
        let pixels = &gen.data()[i * per..(i + 1) * per];
        let binary: Vec<f64> = pixels
            .iter()
            .map(|&p| if p > PHANTOM_MASK_THRESHOLD { 1.0 } else { 0.0 })
            .collect();
        let thresholded = Tensor::new(sample_shape.clone(), binary)?;
        let mask = val
            .mask(i % val.len())
            .ok_or_else(|| Error::InvalidMetric("mask_ssim needs masks".into()))?;
        total += ssim(&thresholded, mask, window)?;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_phantoms, gen_toy2d, Toy2d};
    use crate::models::ModelConfig;
    use crate::models::load_checkpoint;
    use crate::paths::fm_loss;
    use crate::samplers::SamplerFamily;
    use rand_distr::StandardNormal;

    fn small_mlp(data_shape: Vec<usize>) -> ModelConfig {
        ModelConfig {
            data_shape,
            hidden: vec![32, 32],
            time_embed_dim: 16,
            num_classes: None,
            mask_cond: false,
        }
    }

    /// Tight cluster at (3, -2): the mean velocity dominates, so a few
    /// epochs of Adam visibly shrink the loss.
    fn shifted_cluster(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|_| {
                let dx: f64 = rng.sample(StandardNormal);
                let dy: f64 = rng.sample(StandardNormal);
                Tensor::new(vec![2], vec![3.0 + 0.5 * dx, -2.0 + 0.5 * dy]).unwrap()
            })
            .collect();
        Dataset::new("cluster".into(), vec![2], samples, None, None, None).unwrap()
    }

    // ---- adam ----

    #[test]
    fn adam_first_step_matches_hand_computed() {
        // Step 1 with zero moments: m_hat = g, v_hat = g^2, so the update is
        // -lr * g / (|g| + eps) regardless of beta values.
        let hp = AdamParams {
            lr: 0.1,
            ..AdamParams::default()
        };
        let mut params = vec![1.0, 2.0];
        let grads = vec![0.5, -1.0];
        let mut state = AdamState::new(2);
        adam_step(&mut params, &grads, &mut state, &hp).unwrap();
        let expect0 = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8));
        let expect1 = 2.0 - 0.1 * (-1.0 / (1.0 + 1e-8));
        assert!((params[0] - expect0).abs() < 1e-15);
        assert!((params[1] - expect1).abs() < 1e-15);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_second_step_matches_hand_recurrence() {
        let hp = AdamParams {
            lr: 0.01,
            ..AdamParams::default()
        };
        let g = 0.3;
        let mut params = vec![0.0];
        let mut state = AdamState::new(1);
        adam_step(&mut params, &[g], &mut state, &hp).unwrap();
        adam_step(&mut params, &[g], &mut state, &hp).unwrap();

        // By hand: constant gradient keeps m_hat = g and v_hat = g^2 at
        // every step, so each update is -lr * g / (|g| + eps).
        let mut expect = 0.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            expect -= 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        }
        assert!((params[0] - expect).abs() < 1e-15, "{} vs {expect}", params[0]);
        assert_eq!(state.step_count(), 2);
    }

    #[test]
    fn adam_zero_gradient_keeps_params_and_advances_step() {
        let hp = AdamParams::default();
        let mut params = vec![1.5, -0.25, 7.0];
        let before = params.clone();
        let mut state = AdamState::new(3);
        adam_step(&mut params, &[0.0, 0.0, 0.0], &mut state, &hp).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_rejects_misalignment_and_bad_hyperparams() {
        let hp = AdamParams::default();
        let mut params = vec![0.0, 0.0];
        let mut state = AdamState::new(2);
        assert!(adam_step(&mut params, &[1.0], &mut state, &hp).is_err());
        let mut short_state = AdamState::new(1);
        assert!(adam_step(&mut params, &[1.0, 1.0], &mut short_state, &hp).is_err());

        for bad in [
            AdamParams { lr: 0.0, ..hp },
            AdamParams { lr: -1.0, ..hp },
            AdamParams { beta1: 1.0, ..hp },
            AdamParams { beta2: -0.1, ..hp },
            AdamParams { eps: 0.0, ..hp },
        ] {
            assert!(adam_step(&mut params, &[1.0, 1.0], &mut state, &bad).is_err());
        }
    }

    // ---- config ----

    #[test]
    fn config_defaults_fill_in() {
        let cfg: TrainConfig =
            serde_json::from_str(r#"{"path": {"kind": "linear_ot"}}"#).unwrap();
        assert_eq!(cfg.lr, 1e-4);
        assert_eq!(cfg.epochs, 200);
        assert_eq!(cfg.batch_size, None);
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.conditioning, Conditioning::None);
        assert_eq!(cfg.mode, TrainMode::Generate);
        assert_eq!(cfg.adam_beta1, 0.9);
        assert_eq!(cfg.adam_beta2, 0.999);
        assert_eq!(cfg.adam_eps, 1e-8);
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let err = serde_json::from_str::<TrainConfig>(
            r#"{"path": {"kind": "linear_ot"}, "momentum": 0.9}"#,
        );
        assert!(err.is_err());
    }

    #[test]
    fn conditioning_names_round_trip() {
        for c in [
            Conditioning::None,
            Conditioning::Class,
            Conditioning::Mask,
            Conditioning::ClassMask,
        ] {
            let json = serde_json::to_string(&c).unwrap();
            assert_eq!(serde_json::from_str::<Conditioning>(&json).unwrap(), c);
        }
        assert_eq!(
            serde_json::from_str::<Conditioning>("\"class+mask\"").unwrap(),
            Conditioning::ClassMask
        );
    }

    #[test]
    fn batch_size_defaults_depend_on_data_shape() {
        let cfg = TrainConfig::new(PathSpec::linear_ot());
        let toy = gen_toy2d(Toy2d::EightGaussians, 16, 0).unwrap();
        let phantoms = gen_phantoms(4, 8, 0).unwrap();
        assert_eq!(cfg.resolved_batch_size(&toy), 128);
        assert_eq!(cfg.resolved_batch_size(&phantoms), 32);
        let explicit = TrainConfig {
            batch_size: Some(7),
            ..cfg
        };
        assert_eq!(explicit.resolved_batch_size(&toy), 7);
    }

    #[test]
    fn validate_checks_conditioning_against_dataset_and_model() {
        let toy = gen_toy2d(Toy2d::EightGaussians, 16, 0).unwrap();
        let model_cfg = small_mlp(vec![2]);

        let mut cfg = TrainConfig::new(PathSpec::linear_ot());
        cfg.epochs = 1;
        assert!(cfg.validate(&toy, &model_cfg).is_ok());

        // 8-Gaussians carries labels, so class conditioning fails on the
        // model side first.
        cfg.conditioning = Conditioning::Class;
        assert!(cfg.validate(&toy, &model_cfg).is_err());
        let class_model = small_mlp(vec![2]).with_classes(8);
        assert!(cfg.validate(&toy, &class_model).is_ok());

        cfg.conditioning = Conditioning::Mask;
        assert!(cfg.validate(&toy, &model_cfg).is_err());

        cfg.conditioning = Conditioning::None;
        cfg.mode = TrainMode::Denoise;
        cfg.path = PathSpec::vp_default();
        assert!(cfg.validate(&toy, &model_cfg).is_err());

        cfg.path = PathSpec::linear_ot();
        cfg.noise_power = 0.0;
        assert!(cfg.validate(&toy, &model_cfg).is_err());

        cfg.noise_power = 0.1;
        cfg.epochs = 0;
        assert!(cfg.validate(&toy, &model_cfg).is_err());
    }

    #[test]
    fn condition_dropout_rate_is_near_nominal() {
        let mask = Tensor::zeros(vec![1, 2, 2]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let trials = 20_000;
        let mut kept_class = 0usize;
        let mut kept_mask = 0usize;
        for _ in 0..trials {
            let cond = Condition {
                class: Some(3),
                mask: Some(mask.clone()),
            };
            let out = condition_policy(cond, Conditioning::ClassMask, &mut rng);
            kept_class += out.class.is_some() as usize;
            kept_mask += out.mask.is_some() as usize;
        }
        let class_rate = kept_class as f64 / trials as f64;
        let mask_rate = kept_mask as f64 / trials as f64;
        assert!((class_rate - 0.9).abs() < 0.01, "class keep rate {class_rate}");
        assert!((mask_rate - 0.9).abs() < 0.01, "mask keep rate {mask_rate}");

        // Disabled channels are stripped outright, no coins drawn.
        let cond = Condition {
            class: Some(1),
            mask: Some(mask),
        };
        let out = condition_policy(cond.clone(), Conditioning::None, &mut rng);
        assert!(out.class.is_none() && out.mask.is_none());
        let out = condition_policy(cond, Conditioning::Class, &mut rng);
        assert!(out.mask.is_none());
    }

    // ---- log ----

    fn sample_header() -> RunHeader {
        RunHeader {
            path: PathKind::LinearOt,
            mode: TrainMode::Generate,
            conditioning: Conditioning::None,
            epochs: 3,
            batch_size: 16,
            seed: 5,
            notes: vec!["optimizer: adam".into()],
        }
    }

    #[test]
    fn train_log_roundtrips_as_jsonl() {
        let mut log = TrainLog::new(sample_header());
        for epoch in 0..3 {
            log.push(EpochRecord {
                epoch,
                mean_loss: 1.0 / (epoch + 1) as f64,
                wall_time_s: 0.25,
                shuffle_seed: 42 + epoch as u64,
                checkpoint: (epoch == 2).then(|| "checkpoint_0003.ckpt".into()),
            })
            .unwrap();
        }
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 4, "header plus one line per epoch");

        let back = TrainLog::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn train_log_rejects_gaps_and_non_finite_losses() {
        let mut log = TrainLog::new(sample_header());
        log.push(EpochRecord {
            epoch: 0,
            mean_loss: 1.0,
            wall_time_s: 0.1,
            shuffle_seed: 1,
            checkpoint: None,
        })
        .unwrap();
        let gap = log.push(EpochRecord {
            epoch: 2,
            mean_loss: 0.5,
            wall_time_s: 0.1,
            shuffle_seed: 2,
            checkpoint: None,
        });
        assert!(gap.is_err());
        let bad_loss = log.push(EpochRecord {
            epoch: 1,
            mean_loss: f64::NAN,
            wall_time_s: 0.1,
            shuffle_seed: 2,
            checkpoint: None,
        });
        assert!(bad_loss.is_err());
    }

    // ---- training runs ----

    fn quick_config(epochs: usize, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(PathSpec::linear_ot());
        cfg.epochs = epochs;
        cfg.seed = seed;
        cfg.lr = 5e-3;
        cfg
    }

    #[test]
    fn training_shrinks_the_loss_and_helps_held_out_pairs() {
        let data = shifted_cluster(512, 11);
        let init = ConditionedModel::init(small_mlp(vec![2]), 7).unwrap();
        let init_copy = ConditionedModel::init(small_mlp(vec![2]), 7).unwrap();

        let cfg = {
            let mut c = quick_config(16, 3);
            c.batch_size = Some(64);
            c
        };
        let out = train(&data, init, &cfg, &TrainOptions::default()).unwrap();
        let log = &out.log;
        assert_eq!(log.epochs.len(), 16);
        let first = log.epochs[0].mean_loss;
        let last = log.epochs[15].mean_loss;
        assert!(last >= 0.0, "squared-error loss is nonnegative");
        assert!(
            last < 0.5 * first,
            "loss should at least halve: epoch 0 {first}, epoch 15 {last}"
        );

        // Held-out pairs from a fresh rng: the trained model beats its
        // initialization.
        let held_out = shifted_cluster(256, 400);
        let sampler =
            PairSampler::new(&held_out, &cfg.path, TrainMode::Generate, 0.1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(401);
        let pairs: Vec<TrainingPair> = (0..held_out.len())
            .map(|i| sampler.pair_at(i, &mut rng).unwrap())
            .collect();
        let before = fm_loss(&init_copy, &pairs).unwrap();
        let after = fm_loss(&out.model, &pairs).unwrap();
        assert!(
            after < before,
            "held-out fm loss should improve: init {before}, trained {after}"
        );
    }

    #[test]
    fn identical_configs_train_bit_identically() {
        let data = shifted_cluster(64, 21);
        let cfg = {
            let mut c = quick_config(2, 9);
            c.batch_size = Some(32);
            c
        };
        let run = || {
            let model = ConditionedModel::init(small_mlp(vec![2]), 5).unwrap();
            train(&data, model, &cfg, &TrainOptions::default()).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.model.flat_params(), b.model.flat_params());
        let losses =
            |o: &TrainOutcome| o.log.epochs.iter().map(|e| e.mean_loss).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert_eq!(a.adam.moments(), b.adam.moments());
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run_bit_for_bit() {
        let data = shifted_cluster(96, 31);
        let dir = tempfile::tempdir().unwrap();

        let full_cfg = {
            let mut c = quick_config(4, 17);
            c.batch_size = Some(32);
            c
        };
        let model = ConditionedModel::init(small_mlp(vec![2]), 1).unwrap();
        let full = train(&data, model, &full_cfg, &TrainOptions::default()).unwrap();

        // Same run cut at epoch 2, checkpointed with optimizer state, then
        // resumed to the same total.
        let half_cfg = TrainConfig {
            epochs: 2,
            ..full_cfg.clone()
        };
        let model = ConditionedModel::init(small_mlp(vec![2]), 1).unwrap();
        let options = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        };
        let half = train(&data, model, &half_cfg, &options).unwrap();
        let ckpt_name = half.log.epochs.last().unwrap().checkpoint.clone().unwrap();
        assert_eq!(ckpt_name, "checkpoint_0002.ckpt");

        let loaded = load_checkpoint(&dir.path().join(&ckpt_name)).unwrap();
        assert_eq!(loaded.meta.epochs_completed, 2);
        let resumed = resume(&data, loaded, &full_cfg, &TrainOptions::default()).unwrap();

        assert_eq!(
            full.model.flat_params(),
            resumed.model.flat_params(),
            "resumed parameters must match the uninterrupted run bit for bit"
        );
        assert_eq!(full.adam.moments(), resumed.adam.moments());
        assert_eq!(full.adam.step_count(), resumed.adam.step_count());
        let resumed_epochs: Vec<usize> =
            resumed.log.epochs.iter().map(|e| e.epoch).collect();
        assert_eq!(resumed_epochs, vec![2, 3]);
        assert_eq!(
            full.log.epochs[2].mean_loss,
            resumed.log.epochs[0].mean_loss
        );
    }

    #[test]
    fn resume_rejects_mismatched_seed_or_exhausted_epochs() {
        let data = shifted_cluster(32, 41);
        let dir = tempfile::tempdir().unwrap();
        let cfg = {
            let mut c = quick_config(2, 5);
            c.batch_size = Some(16);
            c
        };
        let model = ConditionedModel::init(small_mlp(vec![2]), 2).unwrap();
        let options = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        };
        let out = train(&data, model, &cfg, &options).unwrap();
        let name = out.log.epochs.last().unwrap().checkpoint.clone().unwrap();
        let path = dir.path().join(name);

        let other_seed = TrainConfig { seed: 6, epochs: 4, ..cfg.clone() };
        assert!(resume(&data, load_checkpoint(&path).unwrap(), &other_seed, &options).is_err());

        let exhausted = TrainConfig { epochs: 2, ..cfg };
        assert!(resume(&data, load_checkpoint(&path).unwrap(), &exhausted, &options).is_err());
    }

    #[test]
    fn divergence_reports_epoch_and_step() {
        let data = shifted_cluster(64, 51);
        let model = ConditionedModel::init(small_mlp(vec![2]), 3).unwrap();
        // One Adam step of this size sends parameters to ~1e51, and the next
        // forward pass overflows f64 when three layers compound.
        let mut cfg = quick_config(3, 1);
        cfg.lr = 1e51;
        cfg.batch_size = Some(16);
        let err = match train(&data, model, &cfg, &TrainOptions::default()) {
            Err(e) => e,
            Ok(_) => panic!("expected the run to diverge"),
        };
        assert!(
            matches!(err, Error::Diverged { .. }),
            "expected divergence, got {err:?}"
        );
    }

    #[test]
    fn checkpoint_cadence_writes_expected_files() {
        let data = shifted_cluster(48, 61);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_config(5, 2);
        cfg.batch_size = Some(16);
        cfg.checkpoint_every = Some(2);
        let model = ConditionedModel::init(small_mlp(vec![2]), 4).unwrap();
        let options = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        };
        let out = train(&data, model, &cfg, &options).unwrap();

        let refs: Vec<Option<String>> =
            out.log.epochs.iter().map(|e| e.checkpoint.clone()).collect();
        assert_eq!(
            refs,
            vec![
                None,
                Some("checkpoint_0002.ckpt".into()),
                None,
                Some("checkpoint_0004.ckpt".into()),
                Some("checkpoint_0005.ckpt".into()),
            ]
        );
        for name in refs.into_iter().flatten() {
            let loaded = load_checkpoint(&dir.path().join(&name)).unwrap();
            assert_eq!(loaded.meta.extra.get("dataset").unwrap(), "cluster");
            assert!(loaded.moments.is_some(), "optimizer state travels along");
        }
    }

    #[test]
    fn denoise_mode_trains_on_phantoms() {
        let data = gen_phantoms(8, 8, 71).unwrap();
        let model_cfg = ModelConfig {
            data_shape: vec![1, 8, 8],
            hidden: vec![4, 8, 8],
            time_embed_dim: 16,
            num_classes: None,
            mask_cond: false,
        };
        let model = ConditionedModel::init(model_cfg, 6).unwrap();
        let mut cfg = quick_config(1, 4);
        cfg.mode = TrainMode::Denoise;
        cfg.batch_size = Some(4);
        let out = train(&data, model, &cfg, &TrainOptions::default()).unwrap();
        assert!(out.log.epochs[0].mean_loss.is_finite());
        assert!(out.log.epochs[0].mean_loss >= 0.0);
    }

    // ---- evaluation ----

    #[test]
    fn evaluate_produces_named_deterministic_entries() {
        let data = gen_toy2d(Toy2d::EightGaussians, 80, 13).unwrap();
        let model = ConditionedModel::init(small_mlp(vec![2]), 8).unwrap();
        let path = PathSpec::linear_ot();
        let samplers = vec![
            SamplerConfig::new(SamplerFamily::Euler, 2, 3),
            SamplerConfig::new(SamplerFamily::Heun, 2, 3),
        ];
        let metrics = [MetricKind::Mmd2, MetricKind::SlicedWasserstein];
        let opts = EvalOptions {
            num_samples: Some(16),
            num_projections: 8,
            ..EvalOptions::default()
        };
        let report =
            evaluate(&model, &path, &data, &samplers, &metrics, "test-ckpt", &opts).unwrap();

        assert_eq!(report.entries.len(), 4);
        assert_eq!(report.entries[0].name, "mmd2/euler@2");
        assert_eq!(report.entries[1].name, "sliced_wasserstein/euler@2");
        assert_eq!(report.entries[2].name, "mmd2/heun@2");
        assert_eq!(report.provenance.dataset, "eight_gaussians");
        for e in &report.entries {
            assert!(e.value.is_finite());
            assert_eq!(e.config_digest.len(), 64);
            assert_eq!(e.n_generated, 16);
        }
        // Same sampler config, same digest; different config, different one.
        assert_eq!(
            report.entries[0].config_digest,
            report.entries[1].config_digest
        );
        assert_ne!(
            report.entries[0].config_digest,
            report.entries[2].config_digest
        );

        let again =
            evaluate(&model, &path, &data, &samplers, &metrics, "test-ckpt", &opts).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn evaluate_image_metrics_on_phantoms() {
        let data = gen_phantoms(20, 8, 23).unwrap();
        let model_cfg = ModelConfig {
            data_shape: vec![1, 8, 8],
            hidden: vec![4, 8, 8],
            time_embed_dim: 16,
            num_classes: Some(4),
            mask_cond: true,
        };
        let model = ConditionedModel::init(model_cfg, 9).unwrap();
        let path = PathSpec::linear_ot();
        let samplers = vec![SamplerConfig::new(SamplerFamily::Euler, 2, 1)];
        let metrics = [MetricKind::IntensityShift, MetricKind::MaskSsim];
        let opts = EvalOptions {
            num_samples: Some(4),
            ssim_window: 5,
            ..EvalOptions::default()
        };
        let report =
            evaluate(&model, &path, &data, &samplers, &metrics, "ckpt", &opts).unwrap();
        assert_eq!(report.entries.len(), 2);
        for e in &report.entries {
            assert!(e.value.is_finite(), "{}: {}", e.name, e.value);
        }
        let ssim_entry = &report.entries[1];
        assert!(ssim_entry.name.starts_with("mask_ssim/"));
        assert!((-1.0..=1.0).contains(&ssim_entry.value));
    }

    #[test]
    fn evaluate_rejects_inapplicable_metrics_and_mismatched_samplers() {
        let toy = gen_toy2d(Toy2d::TwoMoons, 40, 3).unwrap();
        let model = ConditionedModel::init(small_mlp(vec![2]), 8).unwrap();
        let path = PathSpec::linear_ot();
        let euler = vec![SamplerConfig::new(SamplerFamily::Euler, 2, 0)];

        let err = evaluate(
            &model,
            &path,
            &toy,
            &euler,
            &[MetricKind::IntensityShift],
            "c",
            &EvalOptions::default(),
        );
        assert!(err.is_err());

        let ddim = vec![SamplerConfig::new(SamplerFamily::Ddim, 2, 0)];
        let err = evaluate(
            &model,
            &path,
            &toy,
            &ddim,
            &[MetricKind::Mmd2],
            "c",
            &EvalOptions::default(),
        );
        assert!(matches!(err, Err(Error::SamplerPathMismatch { .. })));
    }

    #[test]
    fn class_conditional_training_runs_with_dropout() {
        let data = gen_toy2d(Toy2d::EightGaussians, 64, 7).unwrap();
        let model_cfg = ModelConfig {
            data_shape: vec![2],
            hidden: vec![16, 16],
            time_embed_dim: 8,
            num_classes: Some(8),
            mask_cond: false,
        };
        let model = ConditionedModel::init(model_cfg, 3).unwrap();
        let mut cfg = quick_config(2, 8);
        cfg.conditioning = Conditioning::Class;
        cfg.batch_size = Some(32);
        let out = train(&data, model, &cfg, &TrainOptions::default()).unwrap();
        assert_eq!(out.log.header.conditioning, Conditioning::Class);
        assert!(out
            .log
            .header
            .notes
            .iter()
            .any(|n| n.contains("condition dropout")));
    }
}

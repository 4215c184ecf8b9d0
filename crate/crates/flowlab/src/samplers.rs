//! Sample generation: ODE solvers for flow-matching models, ancestral and
//! deterministic updates for diffusion models.
//!
//! All four samplers share one calling convention: a batched initial state,
//! one [`Times`] row per sample, a [`ConditionBatch`], and an optional
//! recorded [`Trajectory`]. The ODE solvers (`euler`, `heun`) integrate the
//! learned velocity field over the uniform grid t_k = k/steps on [0, 1].
//! The diffusion samplers (`ddpm_ancestral`, `ddim`) walk an evenly spaced
//! sub-sequence of the training indices {T-1 .. 0} using the predicted noise.
//!
//! Determinism contract: euler/heun/ddim are bit-identical across runs for a
//! fixed checkpoint and initial state; ddpm_ancestral is bit-identical for a
//! fixed seed. Each sample owns an independent noise stream derived from
//! (seed, sample index), so per-sample results do not depend on batch size.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write as IoWrite;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{ConditionBatch, ConditionedModel, Times};
use crate::numerics::{mix_seed, Tensor};
use crate::paths::{NoiseSchedule, PathKind, PathSpec};

/// Stream tags so initial noise and ancestral noise never share an rng
/// sequence even when the caller reuses one seed for both.
const INIT_DOMAIN: u64 = 0x11;
const ANCESTRAL_DOMAIN: u64 = 0x22;

// ---------------------------------------------------------------------------
// Configuration

/// Which update rule advances the state.
///
/// `Euler` and `Heun` integrate a velocity field and require a model trained
/// on the linear optimal-transport path. `DdpmAncestral` and `Ddim` consume a
/// noise predictor and require a diffusion-trained model plus its schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerFamily {
    Euler,
    Heun,
    DdpmAncestral,
    Ddim,
}

impl SamplerFamily {
    pub fn name(&self) -> &'static str {
        match self {
            SamplerFamily::Euler => "euler",
            SamplerFamily::Heun => "heun",
            SamplerFamily::DdpmAncestral => "ddpm_ancestral",
            SamplerFamily::Ddim => "ddim",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "euler" => Ok(SamplerFamily::Euler),
            "heun" => Ok(SamplerFamily::Heun),
            "ddpm_ancestral" => Ok(SamplerFamily::DdpmAncestral),
            "ddim" => Ok(SamplerFamily::Ddim),
            other => Err(Error::InvalidSampler(format!(
                "unknown sampler family `{other}`; expected one of euler, heun, \
                 ddpm_ancestral, ddim"
            ))),
        }
    }

    /// True for families that integrate a velocity field.
    pub fn is_flow(&self) -> bool {
        matches!(self, SamplerFamily::Euler | SamplerFamily::Heun)
    }
}

/// Full description of one sampling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub family: SamplerFamily,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Off by default: recording keeps steps+1 full batch states in memory.
    #[serde(default)]
    pub record_trajectory: bool,
}

impl SamplerConfig {
    pub fn new(family: SamplerFamily, steps: usize, seed: u64) -> Self {
        SamplerConfig {
            family,
            steps,
            seed,
            record_trajectory: false,
        }
    }

    pub fn with_trajectory(mut self) -> Self {
        self.record_trajectory = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidSampler("steps must be at least 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Predictor abstraction

/// Anything that maps a batched state and per-sample times to a same-shape
/// prediction. For flow matching the prediction is a velocity; for diffusion
/// it is the noise estimate. Tests substitute analytic fields through this
/// trait to check the update rules against closed-form solutions.
pub trait Predictor {
    fn predict(&self, x: &Tensor, times: &Times, cond: &ConditionBatch) -> Result<Tensor>;
}

impl Predictor for ConditionedModel {
    fn predict(&self, x: &Tensor, times: &Times, cond: &ConditionBatch) -> Result<Tensor> {
        self.forward_batch(x, times, cond)
    }
}

// ---------------------------------------------------------------------------
// Trajectory

/// The recorded path of one sampling run over a whole batch.
///
/// `states[k]` is the batched state after k solver steps, so `states[0]` is
/// the initial noise (or corrupted input) and `states[steps]` is the emitted
/// sample. `times[k]` is the solver progress k/steps; for the ODE samplers
/// this equals the path time t at which the state lives.
#[derive(Debug, Clone)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<Tensor>,
}

impl Trajectory {
    fn start(x0: &Tensor) -> Self {
        Trajectory {
            times: vec![0.0],
            states: vec![x0.clone()],
        }
    }

    fn push(&mut self, t: f64, state: &Tensor) {
        self.times.push(t);
        self.states.push(state.clone());
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[Tensor] {
        &self.states
    }

    /// Number of samples the trajectory tracks.
    pub fn batch(&self) -> usize {
        self.states.first().map_or(0, |s| s.shape()[0])
    }

    /// Writes the trajectory as CSV: one row per (sample, step) with the
    /// flattened state in columns x0..x{d-1}.
    pub fn write_csv<W: IoWrite>(&self, mut out: W) -> std::io::Result<()> {
        let batch = self.batch();
        let dim = self
            .states
            .first()
            .map_or(0, |s| s.len() / s.shape()[0].max(1));
        write!(out, "sample_id,step,t")?;
        for d in 0..dim {
            write!(out, ",x{d}")?;
        }
        writeln!(out)?;
        for sample in 0..batch {
            for (step, (t, state)) in self.times.iter().zip(&self.states).enumerate() {
                write!(out, "{sample},{step},{t}")?;
                let row = &state.data()[sample * dim..(sample + 1) * dim];
                for v in row {
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut buf = std::io::BufWriter::new(file);
        self.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
        buf.flush().map_err(|e| Error::io(path, e))
    }
}

/// Result of a sampling run: final samples plus the optional recorded path.
#[derive(Debug)]
pub struct SampleOutput {
    pub samples: Tensor,
    pub trajectory: Option<Trajectory>,
}

// ---------------------------------------------------------------------------
// Shared helpers

fn check_batch(x_init: &Tensor, cond: &ConditionBatch) -> Result<usize> {
    if x_init.rank() == 0 {
        return Err(Error::BadShape {
            op: "sample",
            expected: "batched state [b, ...]",
            got: x_init.shape().to_vec(),
        });
    }
    let batch = x_init.shape()[0];
    if cond.len() != batch {
        return Err(Error::BadCondition(format!(
            "condition batch has {} rows, state has {batch}",
            cond.len()
        )));
    }
    Ok(batch)
}

/// Tensor construction already rejects non-finite values, so an overflow
/// inside a solver step surfaces as a low-level finiteness error. This
/// rewraps it so the failure names the sampler and the step that diverged.
fn at_step(op: &'static str, step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NonFinite {
            op,
            context: Some(format!("state became non-finite at step {step}")),
        },
        other => other,
    }
}

/// Draws the batched standard-normal initial state for generation.
///
/// Sample i comes from its own stream keyed by (seed, i), so the first n
/// samples are unchanged when a later run asks for more.
pub fn initial_noise(data_shape: &[usize], n: usize, seed: u64) -> Result<Tensor> {
    let base = mix_seed(seed, INIT_DOMAIN);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(base, i as u64));
        rows.push(Tensor::randn(data_shape.to_vec(), &mut rng)?);
    }
    Tensor::stack(&rows)
}

/// Evenly spaced strictly decreasing sub-sequence of {len-1 .. 0}.
///
/// Always starts at len-1; includes 0 whenever steps >= 2. With steps == len
/// this is exactly len-1, len-2, .., 0. Requires steps <= len so the spacing
/// never collapses two indices onto each other.
pub fn diffusion_step_indices(len: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::InvalidSampler("steps must be at least 1".into()));
    }
    if steps > len {
        return Err(Error::InvalidSampler(format!(
            "steps {steps} exceeds schedule length {len}"
        )));
    }
    if steps == 1 {
        return Ok(vec![len - 1]);
    }
    let top = (len - 1) as f64;
    let span = (steps - 1) as f64;
    let indices: Vec<usize> = (0..steps)
        .map(|k| (top * (span - k as f64) / span).round() as usize)
        .collect();
    debug_assert!(indices.windows(2).all(|w| w[0] > w[1]));
    Ok(indices)
}

// ---------------------------------------------------------------------------
// ODE solvers

/// Forward Euler on dx/dt = v(x, t): x_{k+1} = x_k + dt v(x_k, t_k).
///
/// With the exact linear-path field the single-step update lands on the
/// target exactly; the learned field inherits that only insofar as training
/// straightened it.
pub fn euler_solve<P: Predictor + ?Sized>(
    field: &P,
    x_init: &Tensor,
    steps: usize,
    cond: &ConditionBatch,
    record: bool,
) -> Result<(Tensor, Option<Trajectory>)> {
    if steps == 0 {
        return Err(Error::InvalidSampler("steps must be at least 1".into()));
    }
    let batch = check_batch(x_init, cond)?;
    let dt = 1.0 / steps as f64;
    let mut x = x_init.clone();
    let mut traj = record.then(|| Trajectory::start(&x));
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let v = field
            .predict(&x, &Times::constant(t, batch), cond)
            .map_err(at_step("euler_solve", k))?;
        x = x.add_scaled(&v, dt).map_err(at_step("euler_solve", k))?;
        if let Some(tr) = traj.as_mut() {
            tr.push((k + 1) as f64 / steps as f64, &x);
        }
    }
    Ok((x, traj))
}

/// Heun (explicit trapezoidal): an Euler predictor followed by averaging the
/// endpoint slopes. Second order, so it beats Euler on smooth fields at equal
/// step counts; identical to Euler for fields constant in x and t.
pub fn heun_solve<P: Predictor + ?Sized>(
    field: &P,
    x_init: &Tensor,
    steps: usize,
    cond: &ConditionBatch,
    record: bool,
) -> Result<(Tensor, Option<Trajectory>)> {
    if steps == 0 {
        return Err(Error::InvalidSampler("steps must be at least 1".into()));
    }
    let batch = check_batch(x_init, cond)?;
    let dt = 1.0 / steps as f64;
    let mut x = x_init.clone();
    let mut traj = record.then(|| Trajectory::start(&x));
    for k in 0..steps {
        let t0 = k as f64 / steps as f64;
        let t1 = (k + 1) as f64 / steps as f64;
        let wrap = at_step("heun_solve", k);
        let v0 = field
            .predict(&x, &Times::constant(t0, batch), cond)
            .map_err(&wrap)?;
        let predictor = x.add_scaled(&v0, dt).map_err(&wrap)?;
        let v1 = field
            .predict(&predictor, &Times::constant(t1, batch), cond)
            .map_err(&wrap)?;
        let slope = v0.add_scaled(&v1, 1.0).map_err(&wrap)?;
        x = x.add_scaled(&slope, dt / 2.0).map_err(&wrap)?;
        if let Some(tr) = traj.as_mut() {
            tr.push(t1, &x);
        }
    }
    Ok((x, traj))
}

// ---------------------------------------------------------------------------
// Diffusion samplers

/// One shared stepping core for the two diffusion samplers. The destination
/// alpha-bar of the last step is 1 (clean data), which turns the final update
/// of both samplers into the plain denoised projection x1_hat.
struct DiffusionStep {
    index: usize,
    alpha_bar: f64,
    dest_alpha_bar: f64,
    last: bool,
}

fn diffusion_steps(schedule: &NoiseSchedule, steps: usize) -> Result<Vec<DiffusionStep>> {
    let indices = diffusion_step_indices(schedule.len(), steps)?;
    let mut out = Vec::with_capacity(indices.len());
    for (k, &index) in indices.iter().enumerate() {
        let last = k + 1 == indices.len();
        out.push(DiffusionStep {
            index,
            alpha_bar: schedule.alpha_bar(index)?,
            dest_alpha_bar: if last {
                1.0
            } else {
                schedule.alpha_bar(indices[k + 1])?
            },
            last,
        });
    }
    Ok(out)
}

/// DDPM ancestral sampling: posterior mean from the predicted noise plus
/// fresh Gaussian noise at every step except the last.
///
/// Skipped-step form: with r = alpha_bar_t / alpha_bar_dest,
///   mean = (x - (1 - r) / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(r)
///   var  = (1 - alpha_bar_dest) / (1 - alpha_bar_t) (1 - r)
/// which reduces to the textbook update when the sub-sequence is dense.
pub fn ddpm_sample<P: Predictor + ?Sized>(
    field: &P,
    schedule: &NoiseSchedule,
    x_init: &Tensor,
    steps: usize,
    cond: &ConditionBatch,
    seed: u64,
    record: bool,
) -> Result<(Tensor, Option<Trajectory>)> {
    let batch = check_batch(x_init, cond)?;
    let plan = diffusion_steps(schedule, steps)?;
    let base = mix_seed(seed, ANCESTRAL_DOMAIN);
    let mut streams: Vec<ChaCha12Rng> = (0..batch)
        .map(|i| ChaCha12Rng::seed_from_u64(mix_seed(base, i as u64)))
        .collect();
    let row = x_init.len() / batch.max(1);

    let mut x = x_init.clone();
    let mut traj = record.then(|| Trajectory::start(&x));
    for (k, step) in plan.iter().enumerate() {
        let wrap = at_step("ddpm_sample", k);
        let eps = field
            .predict(
                &x,
                &Times::Indices {
                    indices: vec![step.index; batch],
                    total: schedule.len(),
                },
                cond,
            )
            .map_err(&wrap)?;
        let ratio = step.alpha_bar / step.dest_alpha_bar;
        let mean = x
            .add_scaled(&eps, -(1.0 - ratio) / (1.0 - step.alpha_bar).sqrt())
            .and_then(|m| m.affine(1.0 / ratio.sqrt(), 0.0))
            .map_err(&wrap)?;
        x = if step.last {
            mean
        } else {
            let var = (1.0 - step.dest_alpha_bar) / (1.0 - step.alpha_bar) * (1.0 - ratio);
            let sigma = var.sqrt();
            let mut noise = Vec::with_capacity(batch * row);
            for stream in streams.iter_mut() {
                noise.extend((0..row).map(|_| {
                    let z: f64 = StandardNormal.sample(stream);
                    z
                }));
            }
            let noise = Tensor::new(x.shape().to_vec(), noise)?;
            mean.add_scaled(&noise, sigma).map_err(&wrap)?
        };
        if let Some(tr) = traj.as_mut() {
            tr.push((k + 1) as f64 / steps as f64, &x);
        }
    }
    Ok((x, traj))
}

/// DDIM with eta = 0: deterministic jumps along the schedule.
///
///   x1_hat = (x - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t)
///   x_next = sqrt(alpha_bar_dest) x1_hat + sqrt(1 - alpha_bar_dest) eps_hat
///
/// With steps == 1 this is the direct x1_hat projection. A noise predictor
/// that is exact for a point-mass target maps any consistent state straight
/// onto the target, whatever the step count.
pub fn ddim_sample<P: Predictor + ?Sized>(
    field: &P,
    schedule: &NoiseSchedule,
    x_init: &Tensor,
    steps: usize,
    cond: &ConditionBatch,
    record: bool,
) -> Result<(Tensor, Option<Trajectory>)> {
    let batch = check_batch(x_init, cond)?;
    let plan = diffusion_steps(schedule, steps)?;
    let mut x = x_init.clone();
    let mut traj = record.then(|| Trajectory::start(&x));
    for (k, step) in plan.iter().enumerate() {
        let wrap = at_step("ddim_sample", k);
        let eps = field
            .predict(
                &x,
                &Times::Indices {
                    indices: vec![step.index; batch],
                    total: schedule.len(),
                },
                cond,
            )
            .map_err(&wrap)?;
        let x1_hat = x
            .add_scaled(&eps, -(1.0 - step.alpha_bar).sqrt())
            .and_then(|p| p.affine(1.0 / step.alpha_bar.sqrt(), 0.0))
            .map_err(&wrap)?;
        x = x1_hat
            .affine(step.dest_alpha_bar.sqrt(), 0.0)
            .and_then(|p| p.add_scaled(&eps, (1.0 - step.dest_alpha_bar).sqrt()))
            .map_err(&wrap)?;
        if let Some(tr) = traj.as_mut() {
            tr.push((k + 1) as f64 / steps as f64, &x);
        }
    }
    Ok((x, traj))
}

// ---------------------------------------------------------------------------
// Unified entry point

/// Runs the configured sampler after checking it is compatible with how the
/// model was trained: velocity integrators need the linear path, diffusion
/// updates need the variance-preserving path and its schedule.
pub fn run_sampler(
    model: &ConditionedModel,
    path: &PathSpec,
    config: &SamplerConfig,
    x_init: &Tensor,
    cond: &ConditionBatch,
) -> Result<SampleOutput> {
    config.validate()?;
    let record = config.record_trajectory;
    let (samples, trajectory) = match config.family {
        SamplerFamily::Euler | SamplerFamily::Heun => {
            if path.kind != PathKind::LinearOt {
                return Err(Error::SamplerPathMismatch {
                    family: config.family.name().into(),
                    path: path.kind.name().into(),
                });
            }
            match config.family {
                SamplerFamily::Euler => euler_solve(model, x_init, config.steps, cond, record)?,
                _ => heun_solve(model, x_init, config.steps, cond, record)?,
            }
        }
        SamplerFamily::DdpmAncestral | SamplerFamily::Ddim => {
            if path.kind != PathKind::VpDiffusion {
                return Err(Error::SamplerPathMismatch {
                    family: config.family.name().into(),
                    path: path.kind.name().into(),
                });
            }
            let schedule = path.build_schedule()?.ok_or_else(|| {
                Error::InvalidSchedule("diffusion sampling requires a schedule".into())
            })?;
            match config.family {
                SamplerFamily::DdpmAncestral => ddpm_sample(
                    model,
                    &schedule,
                    x_init,
                    config.steps,
                    cond,
                    config.seed,
                    record,
                )?,
                _ => ddim_sample(model, &schedule, x_init, config.steps, cond, record)?,
            }
        }
    };
    Ok(SampleOutput {
        samples,
        trajectory,
    })
}

// ---------------------------------------------------------------------------
// Straightness

/// Path curvature score per sample: 1 - chord / arc-length.
///
/// 0 means the recorded states lie on the chord from start to end; values
/// approach 1 as the path folds back on itself. A degenerate path with zero
/// arc length scores 0 by convention: it never moved, so nothing bent.
pub fn straightness_per_sample(traj: &Trajectory) -> Result<Vec<f64>> {
    if traj.states.len() < 3 {
        return Err(Error::InvalidSampler(format!(
            "straightness needs at least 3 recorded states, got {}",
            traj.states.len()
        )));
    }
    let batch = traj.batch();
    let dim = traj.states[0].len() / batch.max(1);
    let mut scores = Vec::with_capacity(batch);
    for i in 0..batch {
        let mut arc = 0.0;
        for pair in traj.states.windows(2) {
            let a = &pair[0].data()[i * dim..(i + 1) * dim];
            let b = &pair[1].data()[i * dim..(i + 1) * dim];
            arc += seg_norm(a, b);
        }
        let first = &traj.states[0].data()[i * dim..(i + 1) * dim];
        let last = &traj.states[traj.states.len() - 1].data()[i * dim..(i + 1) * dim];
        let chord = seg_norm(first, last);
        scores.push(if arc == 0.0 { 0.0 } else { 1.0 - chord / arc });
    }
    Ok(scores)
}

/// Mean of [`straightness_per_sample`] over the batch.
pub fn straightness(traj: &Trajectory) -> Result<f64> {
    let scores = straightness_per_sample(traj)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn seg_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

// ---------------------------------------------------------------------------

//! Probability paths and their training losses.
//!
//! Two paths share one training-pair and loss interface: the linear
//! optimal-transport interpolant `x_t = t*x1 + (1-t)*x0` with velocity target
//! `x1 - x0`, and the variance-preserving diffusion forward process
//! `x_t = sqrt(abar_t)*x1 + sqrt(1-abar_t)*eps` with noise target `eps`.
//! Diffusion pairs store `eps` in the `x0` slot so both losses read the same
//! structure. The model sees continuous `t` for the OT path and `t_index/T`
//! for diffusion, so one network serves both.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{add_speckle, Dataset};
use crate::error::{Error, Result};
use crate::models::{BoundModel, Condition, ConditionBatch, ConditionedModel, Times};
use crate::numerics::{Tape, Tensor, Var};

/// The two path families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    LinearOt,
    VpDiffusion,
}

impl PathKind {
    pub fn name(&self) -> &'static str {
        match self {
            PathKind::LinearOt => "linear_ot",
            PathKind::VpDiffusion => "vp_diffusion",
        }
    }
}

fn default_beta_start() -> f64 {
    1e-4
}

fn default_beta_end() -> f64 {
    0.02
}

fn default_num_train_steps() -> usize {
    1000
}

/// Parameters of the linear beta schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    #[serde(default = "default_num_train_steps")]
    pub num_train_steps: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
            num_train_steps: default_num_train_steps(),
        }
    }
}

/// Precomputed beta and cumulative alpha-bar arrays. Construction guarantees
/// the invariants every consumer relies on: betas in (0,1) and nondecreasing,
/// alpha_bar strictly decreasing with 0 < alpha_bar[T-1] and alpha_bar[0] < 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        let t = spec.num_train_steps;
        if t == 0 {
            return Err(Error::InvalidSchedule("num_train_steps must be positive".into()));
        }
        for (name, v) in [("beta_start", spec.beta_start), ("beta_end", spec.beta_end)] {
            if !v.is_finite() || v <= 0.0 || v >= 1.0 {
                return Err(Error::InvalidSchedule(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if spec.beta_end < spec.beta_start {
            return Err(Error::InvalidSchedule(format!(
                "beta_end {} below beta_start {}",
                spec.beta_end, spec.beta_start
            )));
        }
        let betas: Vec<f64> = if t == 1 {
            vec![spec.beta_start]
        } else {
            (0..t)
                .map(|i| {
                    spec.beta_start + (spec.beta_end - spec.beta_start) * i as f64 / (t - 1) as f64
                })
                .collect()
        };
        let mut alpha_bars = Vec::with_capacity(t);
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        // underflow guard: a long schedule can drive the product to zero
        if *alpha_bars.last().expect("t >= 1") <= 0.0 {
            return Err(Error::InvalidSchedule(
                "alpha_bar underflows to zero at the final step".into(),
            ));
        }
        Ok(Self {
            spec,
            betas,
            alpha_bars,
        })
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    /// Number of training steps T.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects T = 0
    }

    pub fn beta(&self, index: usize) -> Result<f64> {
        self.betas
            .get(index)
            .copied()
            .ok_or(Error::StepOutOfRange {
                index,
                len: self.betas.len(),
            })
    }

    pub fn alpha_bar(&self, index: usize) -> Result<f64> {
        self.alpha_bars
            .get(index)
            .copied()
            .ok_or(Error::StepOutOfRange {
                index,
                len: self.alpha_bars.len(),
            })
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Serializable path choice. The schedule is required for `vp_diffusion` and
/// must be absent for `linear_ot`; [`PathSpec::validate`] enforces this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSpec {
    pub kind: PathKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSpec>,
}

impl PathSpec {
    pub fn linear_ot() -> Self {
        Self {
            kind: PathKind::LinearOt,
            schedule: None,
        }
    }

    /// Diffusion path with the default linear beta schedule.
    pub fn vp_default() -> Self {
        Self {
            kind: PathKind::VpDiffusion,
            schedule: Some(ScheduleSpec::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, &self.schedule) {
            (PathKind::LinearOt, Some(_)) => Err(Error::InvalidSchedule(
                "linear_ot carries no schedule".into(),
            )),
            (PathKind::VpDiffusion, None) => Err(Error::InvalidSchedule(
                "vp_diffusion requires a schedule".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Builds the schedule for diffusion paths, `None` for the OT path.
    pub fn build_schedule(&self) -> Result<Option<NoiseSchedule>> {
        self.validate()?;
        match &self.schedule {
            Some(s) => Ok(Some(NoiseSchedule::new(*s)?)),
            None => Ok(None),
        }
    }
}

/// Time position of one training pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathTime {
    Continuous(f64),
    Index(usize),
}

/// What a training run optimizes toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Source samples are standard normal noise.
    Generate,
    /// Source samples are speckle-corrupted copies of the target: the model
    /// learns a transport from noisy to clean images. OT path only.
    Denoise,
}

/// One supervised example. For diffusion pairs the `x0` slot stores the noise
/// `eps` that formed `x_t`, so the loss can read its target back.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: PathTime,
    pub cond: Condition,
}

/// `t*x1 + (1-t)*x0` for `t` in [0, 1].
pub fn ot_interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange { t });
    }
    if x0.shape() != x1.shape() {
        return Err(Error::ShapeMismatch {
            op: "ot_interpolate",
            left: x0.shape().to_vec(),
            right: x1.shape().to_vec(),
        });
    }
    x0.affine(1.0 - t, 0.0)?.add_scaled(x1, t)
}

/// The constant velocity of the linear path: `x1 - x0`.
pub fn target_velocity(x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(Error::ShapeMismatch {
            op: "target_velocity",
            left: x0.shape().to_vec(),
            right: x1.shape().to_vec(),
        });
    }
    x1.add_scaled(x0, -1.0)
}

/// `sqrt(abar_t)*x1 + sqrt(1-abar_t)*eps` at schedule position `t_index`.
pub fn diffusion_forward(
    x1: &Tensor,
    eps: &Tensor,
    t_index: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if x1.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "diffusion_forward",
            left: x1.shape().to_vec(),
            right: eps.shape().to_vec(),
        });
    }
    let abar = schedule.alpha_bar(t_index)?;
    x1.affine(abar.sqrt(), 0.0)?.add_scaled(eps, (1.0 - abar).sqrt())
}

/// Draws training pairs for one dataset/path/mode combination.
///
/// Draw order per pair is fixed (data index, then time, then source noise) so
/// a seeded rng reproduces pairs bit for bit.
pub struct PairSampler<'d> {
    dataset: &'d Dataset,
    kind: PathKind,
    schedule: Option<NoiseSchedule>,
    mode: TrainMode,
    noise_power: f64,
}

impl<'d> PairSampler<'d> {
    pub fn new(
        dataset: &'d Dataset,
        path: &PathSpec,
        mode: TrainMode,
        noise_power: f64,
    ) -> Result<Self> {
        if dataset.len() == 0 {
            return Err(Error::InvalidDataset("cannot sample pairs from an empty dataset".into()));
        }
        if mode == TrainMode::Denoise && path.kind != PathKind::LinearOt {
            return Err(Error::InvalidTrainConfig(
                "denoise mode transports noisy to clean along the linear OT path; \
                 it is incompatible with vp_diffusion"
                    .into(),
            ));
        }
        Ok(Self {
            dataset,
            kind: path.kind,
            schedule: path.build_schedule()?,
            mode,
            noise_power,
        })
    }

    pub fn schedule(&self) -> Option<&NoiseSchedule> {
        self.schedule.as_ref()
    }

    /// Random data index, then [`Self::pair_at`].
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TrainingPair> {
        let i = rng.gen_range(0..self.dataset.len());
        self.pair_at(i, rng)
    }

    /// Builds the pair for data sample `i`, drawing time and source noise
    /// from `rng`.
    pub fn pair_at<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> Result<TrainingPair> {
        let x1 = self.dataset.sample(i).clone();
        let cond = Condition {
            class: self.dataset.label(i),
            mask: self.dataset.mask(i).cloned(),
        };
        let t = match self.kind {
            PathKind::LinearOt => PathTime::Continuous(rng.gen::<f64>()),
            PathKind::VpDiffusion => {
                let total = self.schedule.as_ref().expect("vp carries a schedule").len();
                PathTime::Index(rng.gen_range(0..total))
            }
        };
        let x0 = match self.mode {
            TrainMode::Generate => Tensor::randn(x1.shape().to_vec(), rng)?,
            TrainMode::Denoise => add_speckle(&x1, self.noise_power, rng)?.noisy,
        };
        Ok(TrainingPair { x0, x1, t, cond })
    }
}

fn batch_conditions(pairs: &[TrainingPair]) -> Result<ConditionBatch> {
    let conds: Vec<Condition> = pairs.iter().map(|p| p.cond.clone()).collect();
    ConditionBatch::from_conditions(&conds)
}

/// Flow-matching loss as a differentiable tape node: mean squared error
/// between the predicted velocity at `(x_t, t, cond)` and `x1 - x0`.
pub fn fm_loss_terms(
    tape: &mut Tape,
    bound: &BoundModel,
    pairs: &[TrainingPair],
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::InvalidTrainConfig("loss over an empty batch".into()));
    }
    let mut xts = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    let mut ts = Vec::with_capacity(pairs.len());
    for p in pairs {
        let t = match p.t {
            PathTime::Continuous(t) => t,
            PathTime::Index(_) => {
                return Err(Error::InvalidTrainConfig(
                    "flow-matching loss got an index-timed pair; those belong to diffusion".into(),
                ))
            }
        };
        xts.push(ot_interpolate(&p.x0, &p.x1, t)?);
        targets.push(target_velocity(&p.x0, &p.x1)?);
        ts.push(t);
    }
    let x = tape.constant(Tensor::stack(&xts)?);
    let target = tape.constant(Tensor::stack(&targets)?);
    let times = Times::Continuous(ts);
    let cond = batch_conditions(pairs)?;
    let pred = bound.forward(tape, x, &times, &cond)?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq, None)
}

/// Diffusion loss as a differentiable tape node: mean squared error between
/// the predicted and true noise. Pairs must carry `eps` in the `x0` slot.
pub fn diffusion_loss_terms(
    tape: &mut Tape,
    bound: &BoundModel,
    pairs: &[TrainingPair],
    schedule: &NoiseSchedule,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::InvalidTrainConfig("loss over an empty batch".into()));
    }
    let mut xts = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    let mut indices = Vec::with_capacity(pairs.len());
    for p in pairs {
        let idx = match p.t {
            PathTime::Index(i) => i,
            PathTime::Continuous(_) => {
                return Err(Error::InvalidTrainConfig(
                    "diffusion loss got a continuous-timed pair; those belong to flow matching"
                        .into(),
                ))
            }
        };
        xts.push(diffusion_forward(&p.x1, &p.x0, idx, schedule)?);
        targets.push(p.x0.clone());
        indices.push(idx);
    }
    let x = tape.constant(Tensor::stack(&xts)?);
    let target = tape.constant(Tensor::stack(&targets)?);
    let times = Times::Indices {
        indices,
        total: schedule.len(),
    };
    let cond = batch_conditions(pairs)?;
    let pred = bound.forward(tape, x, &times, &cond)?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq, None)
}

/// Evaluation-only flow-matching loss on a frozen model.
pub fn fm_loss(model: &ConditionedModel, pairs: &[TrainingPair]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let v = fm_loss_terms(&mut tape, &bound, pairs)?;
    tape.value(v).item()
}

/// Evaluation-only diffusion loss on a frozen model.
pub fn diffusion_loss(
    model: &ConditionedModel,
    pairs: &[TrainingPair],
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let v = diffusion_loss_terms(&mut tape, &bound, pairs, schedule)?;
    tape.value(v).item()
}

//! Conditioned vector-field networks.
//!
//! One [`ConditionedModel`] serves both probability paths: it maps
//! `(x_t, t, condition)` to a tensor shaped like the data, read as a velocity
//! by flow matching and as a noise prediction by diffusion. Vector data gets
//! an MLP trunk, image data a small encoder-decoder with two downsampling
//! stages and additive skips.
//!
//! Conditioning is strictly additive at init: class labels enter as a learned
//! embedding added to the sinusoidal time embedding, masks through a
//! half-width encoder whose features are fused into the trunk via
//! zero-initialized maps. A freshly initialized model is therefore exactly
//! mask-invariant, and conditioning signal grows only through training.

mod checkpoint;
mod net;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, LoadedCheckpoint, OptimizerMeta, ParamInfo, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use net::BoundModel;
pub(crate) use net::{CondEncoder, Trunk};

/// Per-sample conditioning payload. Both fields optional; absent means
/// unconditional along that modality.
#[derive(Debug, Clone, Default)]
pub struct Condition {
    pub class: Option<usize>,
    pub mask: Option<Tensor>,
}

impl Condition {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_class(class: usize) -> Self {
        Self {
            class: Some(class),
            mask: None,
        }
    }

    pub fn with_mask(mask: Tensor) -> Self {
        Self {
            class: None,
            mask: Some(mask),
        }
    }

    pub fn class_and_mask(class: usize, mask: Tensor) -> Self {
        Self {
            class: Some(class),
            mask: Some(mask),
        }
    }
}

/// Batch-aligned conditioning. `None` entries stand for dropped or absent
/// conditions and are realised as the null token (zero embedding row, zero
/// mask) so unconditional sampling matches condition dropout at train time.
#[derive(Debug, Clone)]
pub struct ConditionBatch {
    len: usize,
    classes: Option<Vec<Option<usize>>>,
    masks: Option<Tensor>,
}

impl ConditionBatch {
    pub fn unconditional(len: usize) -> Self {
        Self {
            len,
            classes: None,
            masks: None,
        }
    }

    /// Same class for every sample.
    pub fn repeat_class(class: usize, len: usize) -> Self {
        Self {
            len,
            classes: Some(vec![Some(class); len]),
            masks: None,
        }
    }

    pub fn from_conditions(conds: &[Condition]) -> Result<Self> {
        if conds.is_empty() {
            return Err(Error::BadCondition("empty condition batch".into()));
        }
        let classes = if conds.iter().any(|c| c.class.is_some()) {
            Some(conds.iter().map(|c| c.class).collect())
        } else {
            None
        };
        let masks = if conds.iter().any(|c| c.mask.is_some()) {
            let shape = conds
                .iter()
                .find_map(|c| c.mask.as_ref())
                .map(|m| m.shape().to_vec())
                .expect("checked above");
            let zero = Tensor::zeros(shape.clone())?;
            let rows: Vec<Tensor> = conds
                .iter()
                .map(|c| match &c.mask {
                    Some(m) if m.shape() == shape.as_slice() => Ok(m.clone()),
                    Some(m) => Err(Error::BadCondition(format!(
                        "mask shapes differ within batch: {:?} vs {:?}",
                        m.shape(),
                        shape
                    ))),
                    None => Ok(zero.clone()),
                })
                .collect::<Result<_>>()?;
            Some(Tensor::stack(&rows)?)
        } else {
            None
        };
        Ok(Self {
            len: conds.len(),
            classes,
            masks,
        })
    }

    /// One mask per sample, no class channel.
    pub fn from_masks(masks: &[Tensor]) -> Result<Self> {
        let conds: Vec<Condition> = masks.iter().map(|m| Condition::with_mask(m.clone())).collect();
        Self::from_conditions(&conds)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn classes(&self) -> Option<&[Option<usize>]> {
        self.classes.as_deref()
    }

    pub fn masks(&self) -> Option<&Tensor> {
        self.masks.as_ref()
    }
}

/// Batch of time positions: continuous `t` in [0, 1] for flow matching,
/// schedule indices for diffusion. Both paths share one model interface, so
/// an index `i` out of `total` train steps reaches the network as `i / total`
/// in [0, 1).
#[derive(Debug, Clone)]
pub enum Times {
    Continuous(Vec<f64>),
    Indices { indices: Vec<usize>, total: usize },
}

impl Times {
    pub fn len(&self) -> usize {
        match self {
            Times::Continuous(v) => v.len(),
            Times::Indices { indices, .. } => indices.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same continuous time for every sample.
    pub fn constant(t: f64, len: usize) -> Self {
        Times::Continuous(vec![t; len])
    }

    fn validate(&self) -> Result<()> {
        match self {
            Times::Continuous(v) => {
                for &t in v {
                    if !(0.0..=1.0).contains(&t) {
                        return Err(Error::TimeOutOfRange { t });
                    }
                }
            }
            Times::Indices { indices, total } => {
                for &i in indices {
                    if i >= *total {
                        return Err(Error::StepOutOfRange {
                            index: i,
                            len: *total,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// The scalar each sample's embedding is built from.
    pub fn values(&self) -> Vec<f64> {
        match self {
            Times::Continuous(v) => v.clone(),
            Times::Indices { indices, total } => indices
                .iter()
                .map(|&i| i as f64 / *total as f64)
                .collect(),
        }
    }
}

/// Sinusoidal embedding of a scalar time position: `dim/2` frequency pairs
/// `(sin(w_k t), cos(w_k t))` with `w_k = 10000^(-2k/dim)`. `dim` must be even.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidModelConfig(format!(
            "time embedding dim must be positive and even, got {dim}"
        )));
    }
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let omega = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        out.push((omega * t).sin());
        out.push((omega * t).cos());
    }
    Ok(out)
}

fn time_embedding_batch(times: &Times, dim: usize) -> Result<Tensor> {
    let vals = times.values();
    let mut data = Vec::with_capacity(vals.len() * dim);
    for v in &vals {
        data.extend(time_embedding(*v, dim)?);
    }
    Tensor::new(vec![vals.len(), dim], data)
}

/// Which trunk a data shape selects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrunkKind {
    /// Vector data `[d]`.
    Mlp { dim: usize },
    /// Image data `[h, w]` or `[c, h, w]`; `[h, w]` is treated as one channel.
    Conv { cin: usize, h: usize, w: usize },
}

/// Architecture hyperparameters. `hidden` is the list of MLP widths for
/// vector data, or exactly three channel counts (two downsampling stages plus
/// the bottleneck) for image data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub data_shape: Vec<usize>,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub mask_cond: bool,
}

impl ModelConfig {
    /// Defaults for a data shape: MLP 3x128 for vectors, channels [8, 16, 32]
    /// for images, 64-dim time embedding, unconditional.
    pub fn for_data(data_shape: Vec<usize>) -> Self {
        let hidden = if data_shape.len() == 1 {
            vec![128, 128, 128]
        } else {
            vec![8, 16, 32]
        };
        Self {
            data_shape,
            hidden,
            time_embed_dim: 64,
            num_classes: None,
            mask_cond: false,
        }
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = Some(num_classes);
        self
    }

    pub fn with_mask_cond(mut self) -> Self {
        self.mask_cond = true;
        self
    }

    pub fn trunk_kind(&self) -> Result<TrunkKind> {
        match self.data_shape.as_slice() {
            [d] if *d >= 1 => Ok(TrunkKind::Mlp { dim: *d }),
            [h, w] => Self::conv_kind(1, *h, *w),
            [c, h, w] if *c >= 1 && *c <= 4 => Self::conv_kind(*c, *h, *w),
            other => Err(Error::InvalidModelConfig(format!(
                "unsupported data shape {other:?}"
            ))),
        }
    }

    fn conv_kind(cin: usize, h: usize, w: usize) -> Result<TrunkKind> {
        if !(4..=32).contains(&h) || !(4..=32).contains(&w) || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidModelConfig(format!(
                "image sides must be multiples of 4 in [4, 32], got {h}x{w}"
            )));
        }
        Ok(TrunkKind::Conv { cin, h, w })
    }

    pub fn validate(&self) -> Result<TrunkKind> {
        let kind = self.trunk_kind()?;
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidModelConfig(format!(
                "time_embed_dim must be positive and even, got {}",
                self.time_embed_dim
            )));
        }
        match kind {
            TrunkKind::Mlp { .. } => {
                if self.hidden.is_empty() || self.hidden.contains(&0) {
                    return Err(Error::InvalidModelConfig(
                        "hidden widths must be non-empty and positive".into(),
                    ));
                }
            }
            TrunkKind::Conv { .. } => {
                if self.hidden.len() != 3 || self.hidden.contains(&0) {
                    return Err(Error::InvalidModelConfig(format!(
                        "image trunks take exactly 3 positive channel counts, got {:?}",
                        self.hidden
                    )));
                }
            }
        }
        if self.num_classes == Some(0) {
            return Err(Error::InvalidModelConfig("num_classes must be positive".into()));
        }
        Ok(kind)
    }

    /// Per-sample mask shape this model expects.
    pub fn mask_shape(&self) -> Result<Vec<usize>> {
        Ok(match self.trunk_kind()? {
            TrunkKind::Mlp { dim } => vec![dim],
            TrunkKind::Conv { h, w, .. } => vec![1, h, w],
        })
    }
}

/// A conditioned vector-field network with deterministic parameter order.
pub struct ConditionedModel {
    config: ModelConfig,
    trunk: Trunk,
    class_table: Option<Tensor>,
    encoder: Option<CondEncoder>,
}

impl ConditionedModel {
    /// Initializes parameters from `seed`. The trunk output layer and all
    /// condition-fusion maps start at exactly zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let kind = config.validate()?;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let trunk = Trunk::init(kind, &config, &mut rng)?;
        let class_table = match config.num_classes {
            Some(c) => Some(net::gaussian_tensor(
                vec![c, config.time_embed_dim],
                0.1,
                &mut rng,
            )?),
            None => None,
        };
        let encoder = if config.mask_cond {
            Some(CondEncoder::init(kind, &config, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            config,
            trunk,
            class_table,
            encoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Named parameters in checkpoint order: trunk, class table, condition
    /// encoder.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.trunk.visit("trunk", &mut out);
        if let Some(t) = &self.class_table {
            out.push(("class_table".into(), t));
        }
        if let Some(e) = &self.encoder {
            e.visit("cond_encoder", &mut out);
        }
        out
    }

    pub(crate) fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.trunk.visit_mut(&mut out);
        if let Some(t) = &mut self.class_table {
            out.push(t);
        }
        if let Some(e) = &mut self.encoder {
            e.visit_mut(&mut out);
        }
        out
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// All parameters flattened in checkpoint order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in self.parameters() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites all parameters from a flat buffer in checkpoint order.
    pub fn load_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.param_count();
        if flat.len() != expected {
            return Err(Error::CheckpointMismatch(format!(
                "parameter buffer holds {} values, model needs {expected}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in self.parameters_mut() {
            let n = t.len();
            t.set_data(flat[offset..offset + n].to_vec())?;
            offset += n;
        }
        Ok(())
    }

    /// Records every parameter on `tape` (trainable leaves or frozen
    /// constants) and returns the bound network.
    pub fn bind<'m>(&'m self, tape: &mut Tape, trainable: bool) -> BoundModel<'m> {
        net::bind_model(self, tape, trainable)
    }

    /// Single inference forward pass on a private tape.
    pub fn forward_batch(&self, x: &Tensor, times: &Times, cond: &ConditionBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = bound.forward(&mut tape, xv, times, cond)?;
        Ok(tape.value(out).clone())
    }

    /// The additive contributions the condition encoder would feed into each
    /// trunk fusion point for this batch (all exactly zero at init).
    pub fn encode_condition(&self, cond: &ConditionBatch) -> Result<Vec<Tensor>> {
        if self.encoder.is_none() {
            return Err(Error::BadCondition(
                "model was built without mask conditioning".into(),
            ));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mask = net::canonical_mask_batch(&self.config, cond, cond.len())?;
        let mv = tape.constant(mask);
        let enc = bound.encoder.as_ref().expect("mask_cond model binds an encoder");
        let vars = enc.fusion_contributions(&mut tape, mv)?;
        Ok(vars.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    pub(crate) fn trunk(&self) -> &Trunk {
        &self.trunk
    }

    pub(crate) fn class_table(&self) -> Option<&Tensor> {
        self.class_table.as_ref()
    }

    pub(crate) fn encoder(&self) -> Option<&CondEncoder> {
        self.encoder.as_ref()
    }

    fn validate_forward(&self, x: &Tensor, times: &Times, cond: &ConditionBatch) -> Result<usize> {
        let b = match x.shape().first() {
            Some(&b) if x.shape()[1..] == self.config.data_shape[..] => b,
            _ => {
                return Err(Error::BadShape {
                    op: "model forward",
                    expected: "batch of data-shaped samples",
                    got: x.shape().to_vec(),
                })
            }
        };
        if times.len() != b || cond.len() != b {
            return Err(Error::BadCondition(format!(
                "batch size mismatch: x has {b}, times {}, conditions {}",
                times.len(),
                cond.len()
            )));
        }
        times.validate()?;
        if let Some(classes) = cond.classes() {
            let c = self.config.num_classes.ok_or_else(|| {
                Error::BadCondition("model was built without class conditioning".into())
            })?;
            for k in classes.iter().flatten() {
                if *k >= c {
                    return Err(Error::ClassOutOfRange {
                        index: *k,
                        num_classes: c,
                    });
                }
            }
        }
        if cond.masks().is_some() && !self.config.mask_cond {
            return Err(Error::BadCondition(
                "model was built without mask conditioning".into(),
            ));
        }
        Ok(b)
    }
}

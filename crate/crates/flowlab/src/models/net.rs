//! Layer primitives, the two trunk architectures, and the mask encoders.
//!
//! Everything here is deliberately concrete: linear layers, 3x3 convolutions
//! at stride 1 or 2, nearest-neighbour upsampling, SiLU activations. The bind
//! step clones every parameter onto a tape in the exact order
//! [`super::ConditionedModel::parameters`] reports, so checkpoints, the
//! optimizer, and autodiff all agree on parameter identity.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

use super::{ConditionBatch, ConditionedModel, ModelConfig, Times, TrunkKind};

pub(crate) fn gaussian_tensor<R: Rng + ?Sized>(
    shape: Vec<usize>,
    std: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let base = Tensor::randn(shape.clone(), rng)?;
    let data = base.data().iter().map(|v| v * std).collect();
    Tensor::new(shape, data)
}

/// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), the init for all non-zero layers.
fn fan_in_uniform<R: Rng + ?Sized>(
    shape: Vec<usize>,
    fan_in: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data)
}

/// Dense layer with weight `[fan_in, fan_out]` and bias `[fan_out]`.
pub(crate) struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w: fan_in_uniform(vec![fan_in, fan_out], fan_in, rng)?,
            b: Tensor::zeros(vec![fan_out])?,
        })
    }

    /// Identically zero map; used for output heads and condition fusions.
    fn zeros(fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            w: Tensor::zeros(vec![fan_in, fan_out])?,
            b: Tensor::zeros(vec![fan_out])?,
        })
    }

    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{name}.w"), &self.w));
        out.push((format!("{name}.b"), &self.b));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }

    fn bind(&self, tape: &mut Tape, trainable: bool, params: &mut Vec<Var>) -> BoundLinear {
        let w = bind_tensor(&self.w, tape, trainable, params);
        let b = bind_tensor(&self.b, tape, trainable, params);
        BoundLinear { w, b }
    }
}

pub(crate) struct BoundLinear {
    w: Var,
    b: Var,
}

impl BoundLinear {
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = tape.matmul(x, self.w)?;
        tape.add_row_bias(p, self.b)
    }
}

/// 3x3 convolution, padding 1, with weight `[co, ci, 3, 3]` and bias `[co]`.
pub(crate) struct Conv {
    w: Tensor,
    b: Tensor,
    stride: usize,
}

impl Conv {
    fn init<R: Rng + ?Sized>(ci: usize, co: usize, stride: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w: fan_in_uniform(vec![co, ci, 3, 3], ci * 9, rng)?,
            b: Tensor::zeros(vec![co])?,
            stride,
        })
    }

    fn zeros(ci: usize, co: usize) -> Result<Self> {
        Ok(Self {
            w: Tensor::zeros(vec![co, ci, 3, 3])?,
            b: Tensor::zeros(vec![co])?,
            stride: 1,
        })
    }

    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{name}.w"), &self.w));
        out.push((format!("{name}.b"), &self.b));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }

    fn bind(&self, tape: &mut Tape, trainable: bool, params: &mut Vec<Var>) -> BoundConv {
        let w = bind_tensor(&self.w, tape, trainable, params);
        let b = bind_tensor(&self.b, tape, trainable, params);
        BoundConv {
            w,
            b,
            stride: self.stride,
        }
    }
}

pub(crate) struct BoundConv {
    w: Var,
    b: Var,
    stride: usize,
}

impl BoundConv {
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.conv2d_3x3(x, self.w, self.b, self.stride)
    }
}

fn bind_tensor(t: &Tensor, tape: &mut Tape, trainable: bool, params: &mut Vec<Var>) -> Var {
    let var = if trainable {
        tape.leaf(t.clone().with_requires_grad())
    } else {
        tape.constant(t.clone())
    };
    params.push(var);
    var
}

/// Condition-encoder width for a trunk width: half, rounded up.
fn half_width(w: usize) -> usize {
    (w + 1) / 2
}

/// The unconditioned body of the network.
pub(crate) enum Trunk {
    Mlp {
        lin_in: Linear,
        t_proj: Linear,
        mids: Vec<Linear>,
        lin_out: Linear,
    },
    Conv {
        conv_in: Conv,
        down1: Conv,
        down2: Conv,
        mid: Conv,
        t_proj: Linear,
        up1: Conv,
        up2: Conv,
        conv_out: Conv,
    },
}

impl Trunk {
    pub(crate) fn init<R: Rng + ?Sized>(
        kind: TrunkKind,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let te = config.time_embed_dim;
        match kind {
            TrunkKind::Mlp { dim } => {
                let h = &config.hidden;
                let mut mids = Vec::with_capacity(h.len() - 1);
                let lin_in = Linear::init(dim, h[0], rng)?;
                let t_proj = Linear::init(te, h[0], rng)?;
                for i in 1..h.len() {
                    mids.push(Linear::init(h[i - 1], h[i], rng)?);
                }
                let lin_out = Linear::zeros(h[h.len() - 1], dim)?;
                Ok(Trunk::Mlp {
                    lin_in,
                    t_proj,
                    mids,
                    lin_out,
                })
            }
            TrunkKind::Conv { cin, .. } => {
                let (c0, c1, c2) = (config.hidden[0], config.hidden[1], config.hidden[2]);
                Ok(Trunk::Conv {
                    conv_in: Conv::init(cin, c0, 1, rng)?,
                    down1: Conv::init(c0, c1, 2, rng)?,
                    down2: Conv::init(c1, c2, 2, rng)?,
                    mid: Conv::init(c2, c2, 1, rng)?,
                    t_proj: Linear::init(te, c2, rng)?,
                    up1: Conv::init(c2, c1, 1, rng)?,
                    up2: Conv::init(c1, c0, 1, rng)?,
                    conv_out: Conv::zeros(c0, cin)?,
                })
            }
        }
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        match self {
            Trunk::Mlp {
                lin_in,
                t_proj,
                mids,
                lin_out,
            } => {
                lin_in.visit(&format!("{prefix}.lin_in"), out);
                t_proj.visit(&format!("{prefix}.t_proj"), out);
                for (i, l) in mids.iter().enumerate() {
                    l.visit(&format!("{prefix}.mid{i}"), out);
                }
                lin_out.visit(&format!("{prefix}.lin_out"), out);
            }
            Trunk::Conv {
                conv_in,
                down1,
                down2,
                mid,
                t_proj,
                up1,
                up2,
                conv_out,
            } => {
                conv_in.visit(&format!("{prefix}.conv_in"), out);
                down1.visit(&format!("{prefix}.down1"), out);
                down2.visit(&format!("{prefix}.down2"), out);
                mid.visit(&format!("{prefix}.mid"), out);
                t_proj.visit(&format!("{prefix}.t_proj"), out);
                up1.visit(&format!("{prefix}.up1"), out);
                up2.visit(&format!("{prefix}.up2"), out);
                conv_out.visit(&format!("{prefix}.conv_out"), out);
            }
        }
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        match self {
            Trunk::Mlp {
                lin_in,
                t_proj,
                mids,
                lin_out,
            } => {
                lin_in.visit_mut(out);
                t_proj.visit_mut(out);
                for l in mids {
                    l.visit_mut(out);
                }
                lin_out.visit_mut(out);
            }
            Trunk::Conv {
                conv_in,
                down1,
                down2,
                mid,
                t_proj,
                up1,
                up2,
                conv_out,
            } => {
                conv_in.visit_mut(out);
                down1.visit_mut(out);
                down2.visit_mut(out);
                mid.visit_mut(out);
                t_proj.visit_mut(out);
                up1.visit_mut(out);
                up2.visit_mut(out);
                conv_out.visit_mut(out);
            }
        }
    }

    fn bind(&self, tape: &mut Tape, trainable: bool, params: &mut Vec<Var>) -> BoundTrunk {
        match self {
            Trunk::Mlp {
                lin_in,
                t_proj,
                mids,
                lin_out,
            } => BoundTrunk::Mlp {
                lin_in: lin_in.bind(tape, trainable, params),
                t_proj: t_proj.bind(tape, trainable, params),
                mids: mids.iter().map(|l| l.bind(tape, trainable, params)).collect(),
                lin_out: lin_out.bind(tape, trainable, params),
            },
            Trunk::Conv {
                conv_in,
                down1,
                down2,
                mid,
                t_proj,
                up1,
                up2,
                conv_out,
            } => BoundTrunk::Conv {
                conv_in: conv_in.bind(tape, trainable, params),
                down1: down1.bind(tape, trainable, params),
                down2: down2.bind(tape, trainable, params),
                mid: mid.bind(tape, trainable, params),
                t_proj: t_proj.bind(tape, trainable, params),
                up1: up1.bind(tape, trainable, params),
                up2: up2.bind(tape, trainable, params),
                conv_out: conv_out.bind(tape, trainable, params),
            },
        }
    }
}

pub(crate) enum BoundTrunk {
    Mlp {
        lin_in: BoundLinear,
        t_proj: BoundLinear,
        mids: Vec<BoundLinear>,
        lin_out: BoundLinear,
    },
    Conv {
        conv_in: BoundConv,
        down1: BoundConv,
        down2: BoundConv,
        mid: BoundConv,
        t_proj: BoundLinear,
        up1: BoundConv,
        up2: BoundConv,
        conv_out: BoundConv,
    },
}

impl BoundTrunk {
    /// `x` is already in canonical layout (`[b, d]` or `[b, c, h, w]`),
    /// `emb` is `[b, te]`, `fusions` holds one pre-activation addend per
    /// fusion point when mask conditioning is active.
    fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        emb: Var,
        fusions: Option<&[Var]>,
    ) -> Result<Var> {
        match self {
            BoundTrunk::Mlp {
                lin_in,
                t_proj,
                mids,
                lin_out,
            } => {
                let mut pre = lin_in.forward(tape, x)?;
                let tb = t_proj.forward(tape, emb)?;
                pre = tape.add(pre, tb)?;
                if let Some(f) = fusions {
                    pre = tape.add(pre, f[0])?;
                }
                let mut h = tape.silu(pre)?;
                for (i, layer) in mids.iter().enumerate() {
                    let mut p = layer.forward(tape, h)?;
                    if let Some(f) = fusions {
                        p = tape.add(p, f[i + 1])?;
                    }
                    h = tape.silu(p)?;
                }
                lin_out.forward(tape, h)
            }
            BoundTrunk::Conv {
                conv_in,
                down1,
                down2,
                mid,
                t_proj,
                up1,
                up2,
                conv_out,
            } => {
                let e0 = {
                    let p = conv_in.forward(tape, x)?;
                    tape.silu(p)?
                };
                let e1 = {
                    let p = down1.forward(tape, e0)?;
                    tape.silu(p)?
                };
                let e2 = {
                    let p = down2.forward(tape, e1)?;
                    tape.silu(p)?
                };
                let tb = t_proj.forward(tape, emb)?;
                let mut mid_pre = mid.forward(tape, e2)?;
                mid_pre = tape.add_chan_bias(mid_pre, tb)?;
                if let Some(f) = fusions {
                    mid_pre = tape.add(mid_pre, f[0])?;
                }
                let m = tape.silu(mid_pre)?;

                let u = tape.upsample_nearest2(m)?;
                let mut d1_pre = up1.forward(tape, u)?;
                if let Some(f) = fusions {
                    d1_pre = tape.add(d1_pre, f[1])?;
                }
                let d1_act = tape.silu(d1_pre)?;
                let d1 = tape.add(d1_act, e1)?; // additive skip

                let u = tape.upsample_nearest2(d1)?;
                let mut d2_pre = up2.forward(tape, u)?;
                if let Some(f) = fusions {
                    d2_pre = tape.add(d2_pre, f[2])?;
                }
                let d2_act = tape.silu(d2_pre)?;
                let d2 = tape.add(d2_act, e0)?;

                conv_out.forward(tape, d2)
            }
        }
    }
}

/// Mask encoder mirroring the trunk at half width. Its features enter the
/// trunk only through the zero-initialized fusion maps, so a fresh encoder
/// cannot change the output.
pub(crate) enum CondEncoder {
    Mlp {
        layers: Vec<Linear>,
        fusions: Vec<Linear>,
    },
    Conv {
        enc_in: Conv,
        edown1: Conv,
        edown2: Conv,
        emid: Conv,
        eup1: Conv,
        eup2: Conv,
        fuse_mid: Conv,
        fuse_up1: Conv,
        fuse_up2: Conv,
    },
}

impl CondEncoder {
    pub(crate) fn init<R: Rng + ?Sized>(
        kind: TrunkKind,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        match kind {
            TrunkKind::Mlp { dim } => {
                let h = &config.hidden;
                let mut layers = Vec::with_capacity(h.len());
                let mut fusions = Vec::with_capacity(h.len());
                let mut prev = dim;
                for &width in h {
                    let g = half_width(width);
                    layers.push(Linear::init(prev, g, rng)?);
                    fusions.push(Linear::zeros(g, width)?);
                    prev = g;
                }
                Ok(CondEncoder::Mlp { layers, fusions })
            }
            TrunkKind::Conv { .. } => {
                let (c0, c1, c2) = (config.hidden[0], config.hidden[1], config.hidden[2]);
                let (g0, g1, g2) = (half_width(c0), half_width(c1), half_width(c2));
                Ok(CondEncoder::Conv {
                    enc_in: Conv::init(1, g0, 1, rng)?,
                    edown1: Conv::init(g0, g1, 2, rng)?,
                    edown2: Conv::init(g1, g2, 2, rng)?,
                    emid: Conv::init(g2, g2, 1, rng)?,
                    eup1: Conv::init(g2, g1, 1, rng)?,
                    eup2: Conv::init(g1, g0, 1, rng)?,
                    fuse_mid: Conv::zeros(g2, c2)?,
                    fuse_up1: Conv::zeros(g1, c1)?,
                    fuse_up2: Conv::zeros(g0, c0)?,
                })
            }
        }
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        match self {
            CondEncoder::Mlp { layers, fusions } => {
                for (i, l) in layers.iter().enumerate() {
                    l.visit(&format!("{prefix}.layer{i}"), out);
                }
                for (i, f) in fusions.iter().enumerate() {
                    f.visit(&format!("{prefix}.fuse{i}"), out);
                }
            }
            CondEncoder::Conv {
                enc_in,
                edown1,
                edown2,
                emid,
                eup1,
                eup2,
                fuse_mid,
                fuse_up1,
                fuse_up2,
            } => {
                enc_in.visit(&format!("{prefix}.enc_in"), out);
                edown1.visit(&format!("{prefix}.edown1"), out);
                edown2.visit(&format!("{prefix}.edown2"), out);
                emid.visit(&format!("{prefix}.emid"), out);
                eup1.visit(&format!("{prefix}.eup1"), out);
                eup2.visit(&format!("{prefix}.eup2"), out);
                fuse_mid.visit(&format!("{prefix}.fuse_mid"), out);
                fuse_up1.visit(&format!("{prefix}.fuse_up1"), out);
                fuse_up2.visit(&format!("{prefix}.fuse_up2"), out);
            }
        }
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        match self {
            CondEncoder::Mlp { layers, fusions } => {
                for l in layers {
                    l.visit_mut(out);
                }
                for f in fusions {
                    f.visit_mut(out);
                }
            }
            CondEncoder::Conv {
                enc_in,
                edown1,
                edown2,
                emid,
                eup1,
                eup2,
                fuse_mid,
                fuse_up1,
                fuse_up2,
            } => {
                enc_in.visit_mut(out);
                edown1.visit_mut(out);
                edown2.visit_mut(out);
                emid.visit_mut(out);
                eup1.visit_mut(out);
                eup2.visit_mut(out);
                fuse_mid.visit_mut(out);
                fuse_up1.visit_mut(out);
                fuse_up2.visit_mut(out);
            }
        }
    }

    fn bind(&self, tape: &mut Tape, trainable: bool, params: &mut Vec<Var>) -> BoundEncoder {
        match self {
            CondEncoder::Mlp { layers, fusions } => BoundEncoder::Mlp {
                layers: layers.iter().map(|l| l.bind(tape, trainable, params)).collect(),
                fusions: fusions.iter().map(|f| f.bind(tape, trainable, params)).collect(),
            },
            CondEncoder::Conv {
                enc_in,
                edown1,
                edown2,
                emid,
                eup1,
                eup2,
                fuse_mid,
                fuse_up1,
                fuse_up2,
            } => BoundEncoder::Conv {
                enc_in: enc_in.bind(tape, trainable, params),
                edown1: edown1.bind(tape, trainable, params),
                edown2: edown2.bind(tape, trainable, params),
                emid: emid.bind(tape, trainable, params),
                eup1: eup1.bind(tape, trainable, params),
                eup2: eup2.bind(tape, trainable, params),
                fuse_mid: fuse_mid.bind(tape, trainable, params),
                fuse_up1: fuse_up1.bind(tape, trainable, params),
                fuse_up2: fuse_up2.bind(tape, trainable, params),
            },
        }
    }
}

pub(crate) enum BoundEncoder {
    Mlp {
        layers: Vec<BoundLinear>,
        fusions: Vec<BoundLinear>,
    },
    Conv {
        enc_in: BoundConv,
        edown1: BoundConv,
        edown2: BoundConv,
        emid: BoundConv,
        eup1: BoundConv,
        eup2: BoundConv,
        fuse_mid: BoundConv,
        fuse_up1: BoundConv,
        fuse_up2: BoundConv,
    },
}

impl BoundEncoder {
    /// One pre-activation addend per trunk fusion point, in trunk order.
    pub(crate) fn fusion_contributions(&self, tape: &mut Tape, mask: Var) -> Result<Vec<Var>> {
        match self {
            BoundEncoder::Mlp { layers, fusions } => {
                let mut out = Vec::with_capacity(fusions.len());
                let mut h = mask;
                for (layer, fusion) in layers.iter().zip(fusions) {
                    let p = layer.forward(tape, h)?;
                    h = tape.silu(p)?;
                    out.push(fusion.forward(tape, h)?);
                }
                Ok(out)
            }
            BoundEncoder::Conv {
                enc_in,
                edown1,
                edown2,
                emid,
                eup1,
                eup2,
                fuse_mid,
                fuse_up1,
                fuse_up2,
            } => {
                let f0 = {
                    let p = enc_in.forward(tape, mask)?;
                    tape.silu(p)?
                };
                let f1 = {
                    let p = edown1.forward(tape, f0)?;
                    tape.silu(p)?
                };
                let f2 = {
                    let p = edown2.forward(tape, f1)?;
                    tape.silu(p)?
                };
                let fm = {
                    let p = emid.forward(tape, f2)?;
                    tape.silu(p)?
                };
                let u1 = {
                    let u = tape.upsample_nearest2(fm)?;
                    let p = eup1.forward(tape, u)?;
                    let a = tape.silu(p)?;
                    tape.add(a, f1)?
                };
                let u2 = {
                    let u = tape.upsample_nearest2(u1)?;
                    let p = eup2.forward(tape, u)?;
                    let a = tape.silu(p)?;
                    tape.add(a, f0)?
                };
                Ok(vec![
                    fuse_mid.forward(tape, fm)?,
                    fuse_up1.forward(tape, u1)?,
                    fuse_up2.forward(tape, u2)?,
                ])
            }
        }
    }
}

/// Mask batch in the model's canonical layout: `[b, d]` for MLP trunks,
/// `[b, 1, h, w]` for image trunks. Absent masks become zeros, the null
/// condition.
pub(crate) fn canonical_mask_batch(
    config: &ModelConfig,
    cond: &ConditionBatch,
    batch: usize,
) -> Result<Tensor> {
    let per_sample = config.mask_shape()?;
    let mut canonical = vec![batch];
    canonical.extend_from_slice(&per_sample);
    match cond.masks() {
        None => Tensor::zeros(canonical),
        Some(m) => {
            let expected: usize = per_sample.iter().product();
            let got: usize = m.shape()[1..].iter().product::<usize>();
            if m.shape()[0] != batch || got != expected {
                return Err(Error::BadCondition(format!(
                    "mask batch shape {:?} does not match {} samples of mask shape {:?}",
                    m.shape(),
                    batch,
                    per_sample
                )));
            }
            m.reshape(canonical)
        }
    }
}

/// A model with all parameters recorded on one tape, ready for forward and
/// backward passes.
pub struct BoundModel<'m> {
    model: &'m ConditionedModel,
    trunk: BoundTrunk,
    class_table: Option<Var>,
    pub(crate) encoder: Option<BoundEncoder>,
    params: Vec<Var>,
}

pub(crate) fn bind_model<'m>(
    model: &'m ConditionedModel,
    tape: &mut Tape,
    trainable: bool,
) -> BoundModel<'m> {
    let mut params = Vec::new();
    let trunk = model.trunk().bind(tape, trainable, &mut params);
    let class_table = model
        .class_table()
        .map(|t| bind_tensor(t, tape, trainable, &mut params));
    let encoder = model
        .encoder()
        .map(|e| e.bind(tape, trainable, &mut params));
    BoundModel {
        model,
        trunk,
        class_table,
        encoder,
        params,
    }
}

impl BoundModel<'_> {
    /// Parameter variables in checkpoint order.
    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    /// Evaluates the field at `x` (shape `[b] + data_shape`) for the given
    /// times and conditions. Output has the shape of `x`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        times: &Times,
        cond: &ConditionBatch,
    ) -> Result<Var> {
        let b = self.model.validate_forward(tape.value(x), times, cond)?;
        let config = self.model.config();
        let kind = config.trunk_kind()?;

        // time embedding, plus the class row when classes are present
        let emb_t = super::time_embedding_batch(times, config.time_embed_dim)?;
        let mut emb = tape.constant(emb_t);
        if let (Some(table), Some(classes)) = (self.class_table, cond.classes()) {
            let c = config.num_classes.expect("validated");
            let mut onehot = vec![0.0; b * c];
            for (i, k) in classes.iter().enumerate() {
                if let Some(k) = k {
                    onehot[i * c + k] = 1.0; // None stays a zero row: the null token
                }
            }
            let oh = tape.constant(Tensor::new(vec![b, c], onehot)?);
            let class_emb = tape.matmul(oh, table)?;
            emb = tape.add(emb, class_emb)?;
        }

        // mask-conditioned models always run the encoder so dropped and
        // absent masks take the same zero-mask route as at train time
        let fusions = match &self.encoder {
            Some(enc) => {
                let mask = canonical_mask_batch(config, cond, b)?;
                let mv = tape.constant(mask);
                Some(enc.fusion_contributions(tape, mv)?)
            }
            None => None,
        };

        match kind {
            TrunkKind::Mlp { .. } => self.trunk.forward(tape, x, emb, fusions.as_deref()),
            TrunkKind::Conv { cin, h, w } => {
                let xc = tape.reshape(x, vec![b, cin, h, w])?;
                let out = self.trunk.forward(tape, xc, emb, fusions.as_deref())?;
                let mut back = vec![b];
                back.extend_from_slice(&config.data_shape);
                tape.reshape(out, back)
            }
        }
    }
}

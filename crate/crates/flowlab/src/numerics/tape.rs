//! Reverse-mode automatic differentiation on a recording tape.
//!
//! A [`Tape`] owns every intermediate [`Tensor`] of one computation. Ops push
//! nodes in topological order, so the backward sweep is a single reverse
//! iteration. Tensors on the tape are never mutated; each op allocates its
//! output. A tape is single-threaded by design: one tape per worker.
//!
//! Broadcasting is supported for rank-0 operands only. Domain violations
//! (log of a non-positive value, division by zero, ...) and non-finite
//! results are reported as errors, never as silent NaN.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::conv;
use crate::numerics::tensor::Tensor;

static TAPE_IDS: AtomicU64 = AtomicU64::new(0);

/// Handle to a tensor recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sqrt,
    Tanh,
    Relu,
    Silu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    Reduce {
        kind: ReduceKind,
        a: usize,
        axis: Option<usize>,
    },
    Reshape {
        a: usize,
    },
    /// `[r, c] + [c]`, bias broadcast across rows.
    AddRowBias {
        a: usize,
        b: usize,
    },
    /// `[n, c, h, w] + [n, c]`, bias broadcast across the spatial axes.
    AddChanBias {
        a: usize,
        b: usize,
    },
    /// 3x3 convolution, padding 1, stride 1 or 2.
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
    },
    /// Nearest-neighbour 2x upsampling.
    Upsample2 {
        a: usize,
    },
}

struct Node {
    tensor: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `tensor` as a leaf. Its `requires_grad` flag decides whether
    /// `backward` will produce a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives a gradient (inputs, constants).
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        if t.requires_grad() {
            t = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("tensor was valid");
        }
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.check(v).expect("Var from another tape").tensor
    }

    /// Gradient for `v` after `backward`; `None` if none was computed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.check(v).ok()?.tensor.grad()
    }

    fn check(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar {
                id: v.index,
                len: self.nodes.len(),
            });
        }
        Ok(&self.nodes[v.index])
    }

    fn push(&mut self, tensor: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            tensor,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn finish_op(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Result<Var> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op_name,
                context: Some(format!("produced {bad}")),
            });
        }
        let tensor = Tensor::new(shape, data)?;
        Ok(self.push(tensor, op, requires_grad))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", BinaryKind::Div, a, b)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", UnaryKind::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", UnaryKind::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", UnaryKind::Sqrt, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", UnaryKind::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", UnaryKind::Relu, a)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary("silu", UnaryKind::Silu, a)
    }

    /// Scales by a compile-time constant: `c * a`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.constant(Tensor::scalar(c)?);
        self.mul(a, s)
    }

    fn unary(&mut self, name: &'static str, kind: UnaryKind, a: Var) -> Result<Var> {
        let node = self.check(a)?;
        let x = &node.tensor;
        match kind {
            UnaryKind::Log => {
                if let Some(bad) = x.data().iter().find(|v| **v <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("log of non-positive value {bad}"),
                    });
                }
            }
            UnaryKind::Sqrt => {
                if let Some(bad) = x.data().iter().find(|v| **v < 0.0) {
                    return Err(Error::Domain {
                        op: "sqrt",
                        detail: format!("sqrt of negative value {bad}"),
                    });
                }
            }
            _ => {}
        }
        let data: Vec<f64> = match kind {
            UnaryKind::Neg => x.data().iter().map(|v| -v).collect(),
            UnaryKind::Exp => x.data().iter().map(|v| v.exp()).collect(),
            UnaryKind::Log => x.data().iter().map(|v| v.ln()).collect(),
            UnaryKind::Sqrt => x.data().iter().map(|v| v.sqrt()).collect(),
            UnaryKind::Tanh => x.data().iter().map(|v| v.tanh()).collect(),
            UnaryKind::Relu => x.data().iter().map(|v| v.max(0.0)).collect(),
            UnaryKind::Silu => x.data().iter().map(|v| v * sigmoid(*v)).collect(),
        };
        let shape = x.shape().to_vec();
        let rg = node.requires_grad;
        self.finish_op(name, shape, data, Op::Unary { kind, a: a.index }, rg)
    }

    fn binary(&mut self, name: &'static str, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&na.tensor, &nb.tensor);
        let broadcast_ok = ta.shape() == tb.shape() || ta.rank() == 0 || tb.rank() == 0;
        if !broadcast_ok {
            return Err(Error::ShapeMismatch {
                op: name,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        if kind == BinaryKind::Div {
            if let Some(bad) = tb.data().iter().find(|v| **v == 0.0) {
                return Err(Error::Domain {
                    op: "div",
                    detail: format!("division by zero ({bad})"),
                });
            }
        }
        let shape = if ta.rank() >= tb.rank() {
            ta.shape().to_vec()
        } else {
            tb.shape().to_vec()
        };
        let n = crate::numerics::tensor::element_count(&shape);
        let av = ta.data();
        let bv = tb.data();
        let pick = |s: &[f64], i: usize| if s.len() == 1 { s[0] } else { s[i] };
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = (pick(av, i), pick(bv, i));
            data.push(match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            });
        }
        let rg = na.requires_grad || nb.requires_grad;
        self.finish_op(
            name,
            shape,
            data,
            Op::Binary {
                kind,
                a: a.index,
                b: b.index,
            },
            rg,
        )
    }

    // ---- matmul ----

    /// `[m, k] @ [k, n] -> [m, n]`. Fixed summation order for reproducibility.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&na.tensor, &nb.tensor);
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(Error::BadShape {
                op: "matmul",
                expected: "rank-2 operands",
                got: if ta.rank() != 2 {
                    ta.shape().to_vec()
                } else {
                    tb.shape().to_vec()
                },
            });
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let rg = na.requires_grad || nb.requires_grad;
        self.finish_op(
            "matmul",
            vec![m, n],
            data,
            Op::Matmul {
                a: a.index,
                b: b.index,
            },
            rg,
        )
    }

    // ---- reductions ----

    /// Sum over `axis`, or over all elements (rank-0 result) when `None`.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce("sum", ReduceKind::Sum, a, axis)
    }

    /// Mean over `axis`, or over all elements when `None`.
    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce("mean", ReduceKind::Mean, a, axis)
    }

    fn reduce(&mut self, name: &'static str, kind: ReduceKind, a: Var, axis: Option<usize>) -> Result<Var> {
        let node = self.check(a)?;
        let x = &node.tensor;
        let rg = node.requires_grad;
        match axis {
            None => {
                let total: f64 = x.data().iter().sum();
                let value = match kind {
                    ReduceKind::Sum => total,
                    ReduceKind::Mean => total / x.len() as f64,
                };
                self.finish_op(name, vec![], vec![value], Op::Reduce { kind, a: a.index, axis }, rg)
            }
            Some(ax) => {
                if ax >= x.rank() {
                    return Err(Error::AxisOutOfRange {
                        axis: ax,
                        shape: x.shape().to_vec(),
                    });
                }
                let shape = x.shape();
                let outer: usize = shape[..ax].iter().product();
                let mid = shape[ax];
                let inner: usize = shape[ax + 1..].iter().product();
                let mut out = vec![0.0; outer * inner];
                let data = x.data();
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        let obase = o * inner;
                        for i in 0..inner {
                            out[obase + i] += data[base + i];
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    for v in &mut out {
                        *v /= mid as f64;
                    }
                }
                let mut out_shape = shape.to_vec();
                out_shape.remove(ax);
                self.finish_op(name, out_shape, out, Op::Reduce { kind, a: a.index, axis }, rg)
            }
        }
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let node = self.check(a)?;
        let t = node.tensor.reshape(shape.clone())?;
        let rg = node.requires_grad;
        Ok(self.push(t, Op::Reshape { a: a.index }, rg))
    }

    // ---- model building blocks ----

    /// `[r, c] + [c]`: adds a bias vector to every row.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (na, nb) = (self.check(a)?, self.check(bias)?);
        let (ta, tb) = (&na.tensor, &nb.tensor);
        if ta.rank() != 2 || tb.rank() != 1 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(ta.data()[i * c + j] + tb.data()[j]);
            }
        }
        let rg = na.requires_grad || nb.requires_grad;
        self.finish_op(
            "add_row_bias",
            vec![r, c],
            data,
            Op::AddRowBias {
                a: a.index,
                b: bias.index,
            },
            rg,
        )
    }

    /// `[n, c, h, w] + [n, c]`: per-sample, per-channel bias broadcast over space.
    pub fn add_chan_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (na, nb) = (self.check(a)?, self.check(bias)?);
        let (ta, tb) = (&na.tensor, &nb.tensor);
        if ta.rank() != 4
            || tb.rank() != 2
            || ta.shape()[0] != tb.shape()[0]
            || ta.shape()[1] != tb.shape()[1]
        {
            return Err(Error::ShapeMismatch {
                op: "add_chan_bias",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (n, c, h, w) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], ta.shape()[3]);
        let hw = h * w;
        let mut data = ta.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let b = tb.data()[ni * c + ci];
                let base = (ni * c + ci) * hw;
                for v in &mut data[base..base + hw] {
                    *v += b;
                }
            }
        }
        let rg = na.requires_grad || nb.requires_grad;
        self.finish_op(
            "add_chan_bias",
            ta.shape().to_vec(),
            data,
            Op::AddChanBias {
                a: a.index,
                b: bias.index,
            },
            rg,
        )
    }

    /// 3x3 convolution with padding 1. `input` is `[n, cin, h, w]`, `weight`
    /// `[cout, cin, 3, 3]`, `bias` `[cout]`; `stride` must be 1 or 2.
    pub fn conv2d_3x3(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (ni, nw, nb) = (self.check(input)?, self.check(weight)?, self.check(bias)?);
        let (ti, tw, tb) = (&ni.tensor, &nw.tensor, &nb.tensor);
        conv::validate(ti.shape(), tw.shape(), tb.shape(), stride)?;
        let (shape, data) = conv::forward(ti, tw, tb, stride);
        let rg = ni.requires_grad || nw.requires_grad || nb.requires_grad;
        self.finish_op(
            "conv2d_3x3",
            shape,
            data,
            Op::Conv2d {
                input: input.index,
                weight: weight.index,
                bias: bias.index,
                stride,
            },
            rg,
        )
    }

    /// Nearest-neighbour 2x spatial upsampling of `[n, c, h, w]`.
    pub fn upsample_nearest2(&mut self, a: Var) -> Result<Var> {
        let node = self.check(a)?;
        let t = &node.tensor;
        if t.rank() != 4 {
            return Err(Error::BadShape {
                op: "upsample_nearest2",
                expected: "a rank-4 feature map",
                got: t.shape().to_vec(),
            });
        }
        let (shape, data) = conv::upsample2_forward(t);
        let rg = node.requires_grad;
        self.finish_op("upsample_nearest2", shape, data, Op::Upsample2 { a: a.index }, rg)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Fills gradients for every node that
    /// requires grad; previous gradients on this tape are cleared first.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_node = self.check(root)?;
        if root_node.tensor.len() != 1 {
            return Err(Error::NonScalarRoot {
                shape: root_node.tensor.shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.index] = Some(vec![1.0]);

        for i in (0..=root.index).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(out_grad) = grads[i].take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.distribute(i, &op, &out_grad, &mut grads)?;
            grads[i] = Some(out_grad);
        }

        for g in grads.iter().flatten() {
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: "backward",
                    context: Some(format!("gradient accumulated {bad}")),
                });
            }
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.tensor.set_grad(if node.requires_grad { g } else { None });
        }
        Ok(())
    }

    fn distribute(&self, i: usize, op: &Op, out_grad: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |idx: usize| self.nodes[idx].tensor.data();
        let needs = |idx: usize| self.nodes[idx].requires_grad;
        let out_val = self.nodes[i].tensor.data();

        match *op {
            Op::Leaf => {}
            Op::Unary { kind, a } => {
                if needs(a) {
                    let x = val(a);
                    let contrib: Vec<f64> = match kind {
                        UnaryKind::Neg => out_grad.iter().map(|g| -g).collect(),
                        UnaryKind::Exp => out_grad
                            .iter()
                            .zip(out_val)
                            .map(|(g, y)| g * y)
                            .collect(),
                        UnaryKind::Log => out_grad.iter().zip(x).map(|(g, v)| g / v).collect(),
                        UnaryKind::Sqrt => out_grad
                            .iter()
                            .zip(out_val)
                            .map(|(g, y)| g / (2.0 * y))
                            .collect(),
                        UnaryKind::Tanh => out_grad
                            .iter()
                            .zip(out_val)
                            .map(|(g, y)| g * (1.0 - y * y))
                            .collect(),
                        // d/dx relu(x) at 0 is taken to be 0.
                        UnaryKind::Relu => out_grad
                            .iter()
                            .zip(x)
                            .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                            .collect(),
                        UnaryKind::Silu => out_grad
                            .iter()
                            .zip(x)
                            .map(|(g, v)| {
                                let s = sigmoid(*v);
                                g * (s + v * s * (1.0 - s))
                            })
                            .collect(),
                    };
                    accumulate(grads, a, &contrib, self.nodes[a].tensor.len())?;
                }
            }
            Op::Binary { kind, a, b } => {
                let (av, bv) = (val(a), val(b));
                let pick = |s: &[f64], i: usize| if s.len() == 1 { s[0] } else { s[i] };
                if needs(a) {
                    let contrib: Vec<f64> = match kind {
                        BinaryKind::Add => out_grad.to_vec(),
                        BinaryKind::Sub => out_grad.to_vec(),
                        BinaryKind::Mul => out_grad
                            .iter()
                            .enumerate()
                            .map(|(i, g)| g * pick(bv, i))
                            .collect(),
                        BinaryKind::Div => out_grad
                            .iter()
                            .enumerate()
                            .map(|(i, g)| g / pick(bv, i))
                            .collect(),
                    };
                    accumulate(grads, a, &contrib, av.len())?;
                }
                if needs(b) {
                    let contrib: Vec<f64> = match kind {
                        BinaryKind::Add => out_grad.to_vec(),
                        BinaryKind::Sub => out_grad.iter().map(|g| -g).collect(),
                        BinaryKind::Mul => out_grad
                            .iter()
                            .enumerate()
                            .map(|(i, g)| g * pick(av, i))
                            .collect(),
                        BinaryKind::Div => out_grad
                            .iter()
                            .enumerate()
                            .map(|(i, g)| {
                                let y = pick(bv, i);
                                -g * pick(av, i) / (y * y)
                            })
                            .collect(),
                    };
                    accumulate(grads, b, &contrib, bv.len())?;
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = (
                    self.nodes[a].tensor.shape()[0],
                    self.nodes[a].tensor.shape()[1],
                );
                let n2 = self.nodes[b].tensor.shape()[1];
                if needs(a) {
                    // dA = dC . B^T
                    let contrib = matmul_nt(out_grad, val(b), m, n2, k);
                    accumulate(grads, a, &contrib, m * k)?;
                }
                if needs(b) {
                    // dB = A^T . dC
                    let contrib = matmul_tn(val(a), out_grad, m, k, n2);
                    accumulate(grads, b, &contrib, k * n2)?;
                }
            }
            Op::Reduce { kind, a, axis } => {
                if needs(a) {
                    let in_shape = self.nodes[a].tensor.shape();
                    let n_in = self.nodes[a].tensor.len();
                    let contrib: Vec<f64> = match axis {
                        None => {
                            let g = out_grad[0]
                                / match kind {
                                    ReduceKind::Sum => 1.0,
                                    ReduceKind::Mean => n_in as f64,
                                };
                            vec![g; n_in]
                        }
                        Some(ax) => {
                            let outer: usize = in_shape[..ax].iter().product();
                            let mid = in_shape[ax];
                            let inner: usize = in_shape[ax + 1..].iter().product();
                            let div = match kind {
                                ReduceKind::Sum => 1.0,
                                ReduceKind::Mean => mid as f64,
                            };
                            let mut c = vec![0.0; n_in];
                            for o in 0..outer {
                                for m in 0..mid {
                                    let base = (o * mid + m) * inner;
                                    let obase = o * inner;
                                    for ii in 0..inner {
                                        c[base + ii] = out_grad[obase + ii] / div;
                                    }
                                }
                            }
                            c
                        }
                    };
                    accumulate(grads, a, &contrib, n_in)?;
                }
            }
            Op::Reshape { a } => {
                if needs(a) {
                    accumulate(grads, a, out_grad, self.nodes[a].tensor.len())?;
                }
            }
            Op::AddRowBias { a, b } => {
                let (r, c) = (
                    self.nodes[a].tensor.shape()[0],
                    self.nodes[a].tensor.shape()[1],
                );
                if needs(a) {
                    accumulate(grads, a, out_grad, r * c)?;
                }
                if needs(b) {
                    let mut contrib = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            contrib[j] += out_grad[i * c + j];
                        }
                    }
                    accumulate(grads, b, &contrib, c)?;
                }
            }
            Op::AddChanBias { a, b } => {
                let sh = self.nodes[a].tensor.shape();
                let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                let hw = h * w;
                if needs(a) {
                    accumulate(grads, a, out_grad, n * c * hw)?;
                }
                if needs(b) {
                    let mut contrib = vec![0.0; n * c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            contrib[ni * c + ci] = out_grad[base..base + hw].iter().sum();
                        }
                    }
                    accumulate(grads, b, &contrib, n * c)?;
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            } => {
                let it = &self.nodes[input].tensor;
                let wt = &self.nodes[weight].tensor;
                if needs(input) {
                    let contrib = conv::backward_input(out_grad, it.shape(), wt, stride);
                    accumulate(grads, input, &contrib, it.len())?;
                }
                if needs(weight) {
                    let contrib = conv::backward_weight(out_grad, it, wt.shape(), stride);
                    accumulate(grads, weight, &contrib, wt.len())?;
                }
                if needs(bias) {
                    let contrib = conv::backward_bias(out_grad, it.shape(), wt.shape(), stride);
                    accumulate(grads, bias, &contrib, wt.shape()[0])?;
                }
            }
            Op::Upsample2 { a } => {
                if needs(a) {
                    let contrib = conv::upsample2_backward(out_grad, self.nodes[a].tensor.shape());
                    accumulate(grads, a, &contrib, self.nodes[a].tensor.len())?;
                }
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, contrib: &[f64], target_len: usize) -> Result<()> {
    let slot = grads[idx].get_or_insert_with(|| vec![0.0; target_len]);
    if target_len == 1 && contrib.len() > 1 {
        // rank-0 operand broadcast across a larger tensor: sum contributions
        slot[0] += contrib.iter().sum::<f64>();
    } else {
        debug_assert_eq!(slot.len(), contrib.len());
        for (s, c) in slot.iter_mut().zip(contrib) {
            *s += c;
        }
    }
    Ok(())
}

/// `[m, k] . [k, n]`, row-major, i-k-j loop order for contiguous inner access.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `C . B^T` where `c` is `[m, n]`, `b` is `[k, n]`; result `[m, k]`.
fn matmul_nt(c: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (kk, o) in orow.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            *o = crow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `A^T . C` where `a` is `[m, k]`, `c` is `[m, n]`; result `[k, n]`.
fn matmul_tn(a: &[f64], c: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += av * cv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_and_mul_forward() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let b = tape.leaf(t(&[3], &[10.0, 20.0, 30.0]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[11.0, 22.0, 33.0]);
        let p = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[10.0, 40.0, 90.0]);
    }

    #[test]
    fn rank0_broadcast_both_sides() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let s = tape.constant(Tensor::scalar(10.0).unwrap());
        let left = tape.mul(s, a).unwrap();
        let right = tape.mul(a, s).unwrap();
        assert_eq!(tape.value(left).data(), &[10.0, 20.0]);
        assert_eq!(tape.value(right).data(), &[10.0, 20.0]);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(
            tape.add(a, b),
            Err(Error::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn log_domain_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, -1.0]));
        assert!(matches!(tape.log(a), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn div_by_zero_is_domain_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1], &[1.0]));
        let b = tape.leaf(t(&[1], &[0.0]));
        assert!(matches!(tape.div(a, b), Err(Error::Domain { op: "div", .. })));
    }

    #[test]
    fn exp_overflow_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1], &[800.0]));
        assert!(matches!(tape.exp(a), Err(Error::NonFinite { op: "exp", .. })));
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let p = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_known_product() {
        // [1 2; 3 4] . [5 6; 7 8] = [19 22; 43 50]
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn sum_axis_and_mean() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s0 = tape.sum(a, Some(0)).unwrap();
        assert_eq!(tape.value(s0).data(), &[5.0, 7.0, 9.0]);
        let s1 = tape.sum(a, Some(1)).unwrap();
        assert_eq!(tape.value(s1).data(), &[6.0, 15.0]);
        let m = tape.mean(a, None).unwrap();
        assert_eq!(tape.value(m).data(), &[3.5]);
        assert!(matches!(
            tape.sum(a, Some(2)),
            Err(Error::AxisOutOfRange { axis: 2, .. })
        ));
    }

    #[test]
    fn backward_square() {
        // d/dx sum(x*x) = 2x
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0]).with_requires_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad());
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn backward_unused_leaf_gets_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[2.0]).with_requires_grad());
        let y = tape.leaf(t(&[1], &[5.0]).with_requires_grad());
        let loss = tape.mul(x, x).and_then(|s| tape.sum(s, None)).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
        assert!(tape.grad(y).is_none());
    }

    #[test]
    fn backward_matmul_hand_case() {
        // loss = sum(A.B); dA[i,k] = sum_j B[k,j], dB[k,j] = sum_i A[i,k]
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_requires_grad());
        let b = tape.leaf(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]).with_requires_grad());
        let p = tape.matmul(a, b).unwrap();
        let loss = tape.sum(p, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(tape.grad(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn backward_broadcast_scalar_accumulates() {
        // loss = sum(c * x), dc = sum(x)
        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::scalar(3.0).unwrap().with_requires_grad());
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let p = tape.mul(c, x).unwrap();
        let loss = tape.sum(p, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(c).unwrap(), &[6.0]);
    }

    #[test]
    fn diamond_graph_accumulates_both_branches() {
        // y = x*x + x*x => dy/dx = 4x
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0]).with_requires_grad());
        let a = tape.mul(x, x).unwrap();
        let b = tape.mul(x, x).unwrap();
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
    }

    #[test]
    fn add_row_bias_forward_backward() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_requires_grad());
        let b = tape.leaf(t(&[2], &[10.0, 20.0]).with_requires_grad());
        let y = tape.add_row_bias(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let loss = tape.sum(y, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn var_from_other_tape_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.leaf(t(&[1], &[1.0]));
        let b = t2.leaf(t(&[1], &[1.0]));
        assert!(t2.add(a, b).is_err());
    }

    #[test]
    fn relu_gradient_convention_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]).with_requires_grad());
        let y = tape.relu(x).unwrap();
        let loss = tape.sum(y, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }
}

//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. [`Tape::backward`] walks the nodes in reverse creation
//! order (which is a topological order) and returns [`Gradients`], which can
//! then be accumulated into the [`ParamStore`] the parameters came from.
//!
//! Tapes are single-use: build one per minibatch, call `backward` once, drop
//! it. Gradient accumulation across minibatch elements happens inside that one
//! tape because every op is batched.
//!
//! Broadcasting is limited to scalar ⊗ tensor. Anything else goes through the
//! explicit [`Tape::broadcast_rows`], [`Tape::broadcast_cols`] and
//! [`Tape::tile`] ops.
//!
//! Every op checks that its output is finite and returns
//! [`Error::NonFinite`] otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{digamma, ln_gamma, normal_cdf, normal_pdf, trigamma};
use crate::tensor::{gemm, Layout, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a [`Parameter`] in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Accumulated gradient; same shape as `value`.
    pub grad: Tensor,
}

/// Owns all trainable tensors. Gradients accumulate until [`ParamStore::zero_grad`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Total number of scalar entries over all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Sqrt,
    Square,
    Neg,
    /// max(x, 0)
    Relu,
    NormalCdf,
    NormalPdf,
    LnGamma,
    Digamma,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    LogSumExp,
}

/// Activation whose Gaussian moments have a closed form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Elu { alpha: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum MomentPart {
    Mean,
    Var,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    Clamp {
        a: Var,
        lo: f64,
        hi: f64,
    },
    AddScalar(Var),
    MulScalar(Var, f64),
    MatMul(Var, Var),
    Reduce {
        kind: ReduceKind,
        a: Var,
        axis: usize,
    },
    SumAll(Var),
    Reshape(Var),
    Tile {
        a: Var,
        reps: usize,
    },
    BroadcastRows(Var),
    BroadcastCols(Var),
    SliceCols {
        a: Var,
        start: usize,
    },
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
    },
    ActMoment {
        act: Activation,
        part: MomentPart,
        mean: Var,
        var: Var,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Lower bound on a pre-activation variance below which activation moments
/// switch to their deterministic limits.
pub const VAR_MIN: f64 = 1e-12;

/// Upper bound applied to exponents inside the ELU moment formulas.
pub const ELU_EXP_MAX: f64 = 30.0;

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    variance_clamps: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Number of activation-moment elements whose variance was clamped to 0.
    pub fn variance_clamps(&self) -> usize {
        self.variance_clamps
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf bound to a stored parameter; its gradient is routed back by
    /// [`Gradients::accumulate`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let shape = broadcast_shape(name, ta, tb)?;
        if kind == BinaryKind::Div && tb.data().contains(&0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
        };
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let (sa, sb) = (da.len() == 1 && n != 1, db.len() == 1 && n != 1);
        let data = (0..n)
            .map(|i| f(da[if sa { 0 } else { i }], db[if sb { 0 } else { i }]))
            .collect();
        self.push(Tensor::new(shape, data)?, Op::Binary(kind, a, b), name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (name, f): (&'static str, fn(f64) -> f64) = match kind {
            UnaryKind::Exp => ("exp", f64::exp),
            UnaryKind::Log => ("log", f64::ln),
            UnaryKind::Sqrt => ("sqrt", f64::sqrt),
            UnaryKind::Square => ("square", |x| x * x),
            UnaryKind::Neg => ("neg", |x| -x),
            UnaryKind::Relu => ("relu", |x| x.max(0.0)),
            UnaryKind::NormalCdf => ("normal_cdf", normal_cdf),
            UnaryKind::NormalPdf => ("normal_pdf", normal_pdf),
            UnaryKind::LnGamma => ("ln_gamma", ln_gamma),
            UnaryKind::Digamma => ("digamma", digamma),
        };
        let bad = match kind {
            UnaryKind::Log | UnaryKind::LnGamma | UnaryKind::Digamma => t.data().iter().any(|&x| x <= 0.0),
            UnaryKind::Sqrt => t.data().iter().any(|&x| x < 0.0),
            _ => false,
        };
        if bad {
            return Err(Error::domain(name, "argument outside the function's domain"));
        }
        let out = t.map(f);
        self.push(out, Op::Unary(kind, a), name)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn normal_cdf(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::NormalCdf, a)
    }

    pub fn normal_pdf(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::NormalPdf, a)
    }

    pub fn ln_gamma(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::LnGamma, a)
    }

    pub fn digamma(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Digamma, a)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp { a, lo, hi }, "clamp")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), "add_scalar")
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::MulScalar(a, c), "mul_scalar")
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// Valid (unpadded) 2-D convolution of `x: [B, C, H, W]` with
    /// `k: [O, C, KH, KW]`, giving `[B, O, OH, OW]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.value(x).shape(), self.value(k).shape(), stride)?;
        let out = conv2d_forward(&geo, self.value(x).data(), self.value(k).data());
        let out = Tensor::new(vec![geo.batch, geo.out_ch, geo.out_h, geo.out_w], out)?;
        self.push(out, Op::Conv2d { x, k, stride }, "conv2d")
    }

    // ---- reductions and shape ops -----------------------------------------

    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, n, inner) = axis_split(t.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| d[(o * n + j) * inner + i];
                out[o * inner + i] = match kind {
                    ReduceKind::Sum => (0..n).map(at).sum(),
                    ReduceKind::Mean => (0..n).map(at).sum::<f64>() / n as f64,
                    ReduceKind::LogSumExp => {
                        let max = (0..n).map(at).fold(f64::NEG_INFINITY, f64::max);
                        max + (0..n).map(|j| (at(j) - max).exp()).sum::<f64>().ln()
                    }
                };
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let name = match kind {
            ReduceKind::Sum => "sum",
            ReduceKind::Mean => "mean",
            ReduceKind::LogSumExp => "logsumexp",
        };
        self.push(Tensor::new(shape, out)?, Op::Reduce { kind, a, axis }, name)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a, axis)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a, axis)
    }

    pub fn logsumexp_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::LogSumExp, a, axis)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), "sum")
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = self.sum(a)?;
        self.mul_scalar(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    /// Stack `reps` copies of `a` along its leading axis.
    pub fn tile(&mut self, a: Var, reps: usize) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() == 0 || reps == 0 {
            return Err(Error::shape("tile", "need a non-scalar tensor and reps >= 1"));
        }
        let mut shape = t.shape().to_vec();
        shape[0] *= reps;
        let data = t.data().repeat(reps);
        self.push(Tensor::new(shape, data)?, Op::Tile { a, reps }, "tile")
    }

    /// Repeat a vector `[n]` (or `[1, n]`) as `rows` rows: `[rows, n]`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let t = self.value(a);
        let n = match t.shape() {
            [n] | [1, n] => *n,
            s => return Err(Error::shape("broadcast_rows", format!("got {s:?}"))),
        };
        let data = t.data().repeat(rows);
        self.push(
            Tensor::new(vec![rows, n], data)?,
            Op::BroadcastRows(a),
            "broadcast_rows",
        )
    }

    /// Repeat a vector `[m]` as `cols` columns: `[m, cols]`.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let t = self.value(a);
        let m = match t.shape() {
            [m] | [m, 1] => *m,
            s => return Err(Error::shape("broadcast_cols", format!("got {s:?}"))),
        };
        let data = t.data().iter().flat_map(|&x| std::iter::repeat_n(x, cols)).collect();
        self.push(
            Tensor::new(vec![m, cols], data)?,
            Op::BroadcastCols(a),
            "broadcast_cols",
        )
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        if start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} out of {c}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        self.push(
            Tensor::new(vec![r, len], data)?,
            Op::SliceCols { a, start },
            "slice_cols",
        )
    }

    // ---- activation moments -------------------------------------------------

    pub(crate) fn act_moment(&mut self, act: Activation, part: MomentPart, mean: Var, var: Var) -> Result<Var> {
        let (tm, tv) = (self.value(mean), self.value(var));
        if tm.shape() != tv.shape() {
            return Err(Error::ShapeMismatch {
                op: "activation_moments",
                lhs: tm.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        if tv.data().iter().any(|&v| v < 0.0) {
            return Err(Error::domain("activation_moments", "negative input variance"));
        }
        let mut clamps = 0;
        let out = tm.zip_map(tv, |m, v| {
            let g = gaussian_act_moments(act, m, v);
            match part {
                MomentPart::Mean => g.mean,
                MomentPart::Var => {
                    clamps += usize::from(g.var_clamped);
                    g.var
                }
            }
        })?;
        self.variance_clamps += clamps;
        if clamps > 0 {
            log::debug!("activation variance clamped at {clamps} points");
        }
        self.push(out, Op::ActMoment { act, part, mean, var }, "activation_moments")
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got shape {:?}", self.value(root).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(self.value(root).shape()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(root.0 + 1)
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((Var(i), id)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let n = gd.len();
                let (da, db) = (ta.data(), tb.data());
                let ai = |i: usize| da[if da.len() == 1 { 0 } else { i }];
                let bi = |i: usize| db[if db.len() == 1 { 0 } else { i }];
                let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                    BinaryKind::Add => (gd.to_vec(), gd.to_vec()),
                    BinaryKind::Sub => (gd.to_vec(), gd.iter().map(|x| -x).collect()),
                    BinaryKind::Mul => (
                        (0..n).map(|i| gd[i] * bi(i)).collect(),
                        (0..n).map(|i| gd[i] * ai(i)).collect(),
                    ),
                    BinaryKind::Div => (
                        (0..n).map(|i| gd[i] / bi(i)).collect(),
                        (0..n).map(|i| -gd[i] * ai(i) / (bi(i) * bi(i))).collect(),
                    ),
                };
                accumulate(grads, a, reduce_broadcast(ga, ta, g.shape())?)?;
                accumulate(grads, b, reduce_broadcast(gb, tb, g.shape())?)?;
            }
            Op::Unary(kind, a) => {
                let x = self.value(a).data();
                let y = node.value.data();
                let ga: Vec<f64> = (0..gd.len())
                    .map(|i| {
                        let d = match kind {
                            UnaryKind::Exp => y[i],
                            UnaryKind::Log => 1.0 / x[i],
                            // Subgradient 0 at the origin.
                            UnaryKind::Sqrt if y[i] == 0.0 => 0.0,
                            UnaryKind::Sqrt => 0.5 / y[i],
                            UnaryKind::Square => 2.0 * x[i],
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Relu => f64::from(u8::from(x[i] > 0.0)),
                            UnaryKind::NormalCdf => normal_pdf(x[i]),
                            UnaryKind::NormalPdf => -x[i] * y[i],
                            UnaryKind::LnGamma => digamma(x[i]),
                            UnaryKind::Digamma => trigamma(x[i]),
                        };
                        gd[i] * d
                    })
                    .collect();
                accumulate(grads, a, Tensor::new(g.shape().to_vec(), ga)?)?;
            }
            Op::Clamp { a, lo, hi } => {
                let x = self.value(a).data();
                let ga = (0..gd.len())
                    .map(|i| if x[i] >= lo && x[i] <= hi { gd[i] } else { 0.0 })
                    .collect();
                accumulate(grads, a, Tensor::new(g.shape().to_vec(), ga)?)?;
            }
            Op::AddScalar(a) => accumulate(grads, a, g.clone())?,
            Op::MulScalar(a, c) => accumulate(grads, a, g.map(|x| x * c))?,
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k) = ta.dims2()?;
                let (_, n) = tb.dims2()?;
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, gd, Layout::N, tb.data(), Layout::T, &mut ga, 0.0);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, ta.data(), Layout::T, gd, Layout::N, &mut gb, 0.0);
                accumulate(grads, a, Tensor::new(vec![m, k], ga)?)?;
                accumulate(grads, b, Tensor::new(vec![k, n], gb)?)?;
            }
            Op::Conv2d { x, k, stride } => {
                let (tx, tk) = (self.value(x), self.value(k));
                let geo = ConvGeometry::new(tx.shape(), tk.shape(), stride)?;
                let (gx, gk) = conv2d_backward(&geo, tx.data(), tk.data(), gd);
                accumulate(grads, x, Tensor::new(tx.shape().to_vec(), gx)?)?;
                accumulate(grads, k, Tensor::new(tk.shape().to_vec(), gk)?)?;
            }
            Op::Reduce { kind, a, axis } => {
                let t = self.value(a);
                let (outer, n, inner) = axis_split(t.shape(), axis)?;
                let x = t.data();
                let y = node.value.data();
                let mut ga = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let go = gd[o * inner + i];
                        for j in 0..n {
                            let idx = (o * n + j) * inner + i;
                            ga[idx] = match kind {
                                ReduceKind::Sum => go,
                                ReduceKind::Mean => go / n as f64,
                                ReduceKind::LogSumExp => go * (x[idx] - y[o * inner + i]).exp(),
                            };
                        }
                    }
                }
                accumulate(grads, a, Tensor::new(t.shape().to_vec(), ga)?)?;
            }
            Op::SumAll(a) => {
                let shape = self.value(a).shape();
                accumulate(grads, a, Tensor::full(shape, gd[0]))?;
            }
            Op::Reshape(a) => {
                let shape = self.value(a).shape().to_vec();
                accumulate(grads, a, g.reshape(&shape)?)?;
            }
            Op::Tile { a, reps } => {
                let t = self.value(a);
                let len = t.len();
                let mut ga = vec![0.0; len];
                for r in 0..reps {
                    for (j, acc) in ga.iter_mut().enumerate() {
                        *acc += gd[r * len + j];
                    }
                }
                accumulate(grads, a, Tensor::new(t.shape().to_vec(), ga)?)?;
            }
            Op::BroadcastRows(a) => {
                let t = self.value(a);
                let n = t.len();
                let mut ga = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (acc, v) in ga.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(grads, a, Tensor::new(t.shape().to_vec(), ga)?)?;
            }
            Op::BroadcastCols(a) => {
                let t = self.value(a);
                let cols = g.shape()[1];
                let ga = gd.chunks(cols).map(|row| row.iter().sum()).collect();
                accumulate(grads, a, Tensor::new(t.shape().to_vec(), ga)?)?;
            }
            Op::SliceCols { a, start } => {
                let t = self.value(a);
                let (r, c) = t.dims2()?;
                let len = g.shape()[1];
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    ga[i * c + start..i * c + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                accumulate(grads, a, Tensor::new(vec![r, c], ga)?)?;
            }
            Op::ActMoment { act, part, mean, var } => {
                let (tm, tv) = (self.value(mean), self.value(var));
                let n = gd.len();
                let mut gm = vec![0.0; n];
                let mut gv = vec![0.0; n];
                for i in 0..n {
                    let m = gaussian_act_moments(act, tm.data()[i], tv.data()[i]);
                    let (dm, dv) = match part {
                        MomentPart::Mean => (m.dmean_dm, m.dmean_dv),
                        MomentPart::Var => (m.dvar_dm, m.dvar_dv),
                    };
                    gm[i] = gd[i] * dm;
                    gv[i] = gd[i] * dv;
                }
                accumulate(grads, mean, Tensor::new(tm.shape().to_vec(), gm)?)?;
                accumulate(grads, var, Tensor::new(tv.shape().to_vec(), gv)?)?;
            }
        }
        Ok(())
    }
}

/// Result of [`Tape::backward`]: adjoints for every node reachable from the root.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(Var, ParamId)>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` if `v` does not
    /// influence the root.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Add parameter gradients into `store`. Parameters that do not reach the
    /// root receive nothing.
    pub fn accumulate(&self, store: &mut ParamStore) -> Result<()> {
        for &(v, id) in &self.params {
            if let Some(g) = self.wrt(v) {
                store.get_mut(id).grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.len() == 1 {
        Ok(b.shape().to_vec())
    } else if b.len() == 1 {
        Ok(a.shape().to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

/// Sum a full-size adjoint back down to a broadcast scalar operand.
fn reduce_broadcast(g: Vec<f64>, operand: &Tensor, out_shape: &[usize]) -> Result<Tensor> {
    if operand.len() == 1 && g.len() != 1 {
        Tensor::new(operand.shape().to_vec(), vec![g.iter().sum()])
    } else {
        Tensor::new(out_shape.to_vec(), g)?.reshape(operand.shape())
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape("reduce", format!("axis {axis} invalid for {shape:?}")));
    }
    let n = shape[axis];
    if n == 0 {
        return Err(Error::shape("reduce", "empty axis"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, n, inner))
}

// ---- convolution -----------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], k: &[usize], stride: usize) -> Result<Self> {
        let (&[batch, in_ch, in_h, in_w], &[out_ch, k_ch, kh, kw]) = (x, k) else {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-D input and kernel, got {x:?} and {k:?}"),
            ));
        };
        if stride < 1 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        if k_ch != in_ch {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: k.to_vec(),
            });
        }
        if kh > in_h || kw > in_w || kh == 0 || kw == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit input {in_h}x{in_w}"),
            ));
        }
        Ok(Self {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kh,
            kw,
            stride,
            out_h: (in_h - kh) / stride + 1,
            out_w: (in_w - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

fn im2col(geo: &ConvGeometry, x: &[f64]) -> Vec<f64> {
    let plen = geo.patch_len();
    let mut cols = vec![0.0; geo.positions() * plen];
    for b in 0..geo.batch {
        for oi in 0..geo.out_h {
            for oj in 0..geo.out_w {
                let row = ((b * geo.out_h + oi) * geo.out_w + oj) * plen;
                for c in 0..geo.in_ch {
                    for p in 0..geo.kh {
                        let src = ((b * geo.in_ch + c) * geo.in_h + oi * geo.stride + p) * geo.in_w + oj * geo.stride;
                        let dst = row + (c * geo.kh + p) * geo.kw;
                        cols[dst..dst + geo.kw].copy_from_slice(&x[src..src + geo.kw]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(geo: &ConvGeometry, cols: &[f64]) -> Vec<f64> {
    let plen = geo.patch_len();
    let mut x = vec![0.0; geo.batch * geo.in_ch * geo.in_h * geo.in_w];
    for b in 0..geo.batch {
        for oi in 0..geo.out_h {
            for oj in 0..geo.out_w {
                let row = ((b * geo.out_h + oi) * geo.out_w + oj) * plen;
                for c in 0..geo.in_ch {
                    for p in 0..geo.kh {
                        let dst = ((b * geo.in_ch + c) * geo.in_h + oi * geo.stride + p) * geo.in_w + oj * geo.stride;
                        let src = row + (c * geo.kh + p) * geo.kw;
                        for q in 0..geo.kw {
                            x[dst + q] += cols[src + q];
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv2d_forward(geo: &ConvGeometry, x: &[f64], k: &[f64]) -> Vec<f64> {
    let cols = im2col(geo, x);
    let (pos, plen, oc) = (geo.positions(), geo.patch_len(), geo.out_ch);
    let mut mat = vec![0.0; pos * oc];
    gemm(pos, plen, oc, &cols, Layout::N, k, Layout::T, &mut mat, 0.0);
    // [B, OH, OW, O] -> [B, O, OH, OW]
    let hw = geo.out_h * geo.out_w;
    let mut out = vec![0.0; pos * oc];
    for b in 0..geo.batch {
        for s in 0..hw {
            for o in 0..oc {
                out[(b * oc + o) * hw + s] = mat[(b * hw + s) * oc + o];
            }
        }
    }
    out
}

fn conv2d_backward(geo: &ConvGeometry, x: &[f64], k: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (pos, plen, oc) = (geo.positions(), geo.patch_len(), geo.out_ch);
    let hw = geo.out_h * geo.out_w;
    let mut gmat = vec![0.0; pos * oc];
    for b in 0..geo.batch {
        for s in 0..hw {
            for o in 0..oc {
                gmat[(b * hw + s) * oc + o] = g[(b * oc + o) * hw + s];
            }
        }
    }
    let cols = im2col(geo, x);
    let mut gk = vec![0.0; oc * plen];
    gemm(oc, pos, plen, &gmat, Layout::T, &cols, Layout::N, &mut gk, 0.0);
    let mut gcols = vec![0.0; pos * plen];
    gemm(pos, oc, plen, &gmat, Layout::N, k, Layout::N, &mut gcols, 0.0);
    (col2im(geo, &gcols), gk)
}

// ---- closed-form activation moments -----------------------------------------

/// Moments of `a(f)` for `f ~ N(m, v)` together with their partial derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActMoments {
    pub mean: f64,
    pub var: f64,
    pub dmean_dm: f64,
    pub dmean_dv: f64,
    pub dvar_dm: f64,
    pub dvar_dv: f64,
    /// The raw variance came out negative and was clamped to zero.
    pub var_clamped: bool,
}

/// Closed-form mean and variance of `act(f)` for `f ~ N(m, v)`.
pub fn gaussian_act_moments(act: Activation, m: f64, v: f64) -> ActMoments {
    match act {
        Activation::Identity => ActMoments {
            mean: m,
            var: v,
            dmean_dm: 1.0,
            dmean_dv: 0.0,
            dvar_dm: 0.0,
            dvar_dv: 1.0,
            var_clamped: false,
        },
        Activation::Relu => relu_moments(m, v),
        Activation::Elu { alpha } => elu_moments(m, v, alpha),
    }
}

struct ReluParts {
    s: f64,
    cdf: f64,
    pdf: f64,
    mean: f64,
    second: f64,
}

fn relu_parts(m: f64, v: f64) -> ReluParts {
    let s = v.sqrt();
    let r = m / s;
    let (cdf, pdf) = (normal_cdf(r), normal_pdf(r));
    ReluParts {
        s,
        cdf,
        pdf,
        mean: m * cdf + s * pdf,
        second: (m * m + v) * cdf + m * s * pdf,
    }
}

fn finish(mean: f64, second: f64, dmean: (f64, f64), dsecond: (f64, f64)) -> ActMoments {
    let raw = second - mean * mean;
    let clamped = raw < 0.0;
    let (dvar_dm, dvar_dv) = if clamped {
        (0.0, 0.0)
    } else {
        (dsecond.0 - 2.0 * mean * dmean.0, dsecond.1 - 2.0 * mean * dmean.1)
    };
    ActMoments {
        mean,
        var: raw.max(0.0),
        dmean_dm: dmean.0,
        dmean_dv: dmean.1,
        dvar_dm,
        dvar_dv,
        var_clamped: clamped,
    }
}

fn relu_moments(m: f64, v: f64) -> ActMoments {
    if v < VAR_MIN {
        let h = if m > 0.0 {
            1.0
        } else if m == 0.0 {
            0.5
        } else {
            0.0
        };
        return ActMoments {
            mean: m.max(0.0),
            var: 0.0,
            dmean_dm: h,
            dmean_dv: 0.0,
            dvar_dm: 0.0,
            dvar_dv: h,
            var_clamped: false,
        };
    }
    let p = relu_parts(m, v);
    finish(p.mean, p.second, (p.cdf, p.pdf / (2.0 * p.s)), (2.0 * p.mean, p.cdf))
}

fn elu_moments(m: f64, v: f64, alpha: f64) -> ActMoments {
    if v < VAR_MIN {
        let (g, dg, d2g) = if m > 0.0 {
            (m, 1.0, 0.0)
        } else {
            let e = m.exp();
            (alpha * (e - 1.0), alpha * e, alpha * e)
        };
        return ActMoments {
            mean: g,
            var: 0.0,
            dmean_dm: dg,
            dmean_dv: 0.5 * d2g,
            dvar_dm: 0.0,
            dvar_dv: dg * dg,
            var_clamped: false,
        };
    }
    let r = relu_parts(m, v);
    let s = r.s;
    let s3 = s * v;
    // Q = Φ(-m/s); A = E[e^f; f<0]; B = E[e^{2f}; f<0]. Exponents are formed in
    // log space, so the products never overflow before the clamp.
    let q = normal_cdf(-m / s);
    let log_a = (m + 0.5 * v + crate::special::log_normal_cdf(-(m + v) / s)).min(ELU_EXP_MAX);
    let log_b = (2.0 * m + 2.0 * v + crate::special::log_normal_cdf(-(m + 2.0 * v) / s)).min(ELU_EXP_MAX);
    let (a, b) = (log_a.exp(), log_b.exp());
    // exp(m + v/2)·φ((m+v)/s) and exp(2m + 2v)·φ((m+2v)/s) both equal φ(m/s).
    let pdf = r.pdf;

    let dq = (-pdf / s, pdf * m / (2.0 * s3));
    let da = (a - pdf / s, 0.5 * a + pdf * (-1.0 / s + (m + v) / (2.0 * s3)));
    let db = (
        2.0 * b - pdf / s,
        2.0 * b + pdf * (-2.0 / s + (m + 2.0 * v) / (2.0 * s3)),
    );

    let mean = alpha * (a - q) + r.mean;
    let second = alpha * alpha * (b - 2.0 * a + q) + r.second;
    let dmean = (alpha * (da.0 - dq.0) + r.cdf, alpha * (da.1 - dq.1) + r.pdf / (2.0 * s));
    let dsecond = (
        alpha * alpha * (db.0 - 2.0 * da.0 + dq.0) + 2.0 * r.mean,
        alpha * alpha * (db.1 - 2.0 * da.1 + dq.1) + r.cdf,
    );
    finish(mean, second, dmean, dsecond)
}

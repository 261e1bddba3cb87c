//! Moment propagation through layers with Gaussian weights.
//!
//! Each weight is an independent Gaussian `N(μ, σ²)` with `σ² = exp(ρ)`. For a
//! pre-activation `f_j = Σ_k w_jk h_k` with independent `w` and `h`,
//!
//! ```text
//! E[f_j]   = Σ_k μ_jk E[h_k]
//! Var[f_j] = Σ_k (μ_jk² + σ_jk²) Var[h_k] + σ_jk² E[h_k]²
//! ```
//!
//! and `f_j` is treated as Gaussian. Units are assumed uncorrelated, so only
//! diagonal variances are carried between layers.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, MomentPart, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean and variance of a diagonal Gaussian over some activation tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianActivation {
    pub mean: Tensor,
    pub var: Tensor,
}

impl GaussianActivation {
    pub fn new(mean: Tensor, var: Tensor) -> Result<Self> {
        if mean.shape() != var.shape() {
            return Err(Error::ShapeMismatch {
                op: "gaussian_activation",
                lhs: mean.shape().to_vec(),
                rhs: var.shape().to_vec(),
            });
        }
        if !mean.all_finite() || !var.all_finite() {
            return Err(Error::NonFinite {
                op: "gaussian_activation",
            });
        }
        if var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::domain("gaussian_activation", "negative variance"));
        }
        Ok(Self { mean, var })
    }

    /// Zero-variance activation.
    pub fn deterministic(mean: Tensor) -> Self {
        let var = Tensor::zeros(mean.shape());
        Self { mean, var }
    }
}

/// Tape handles for a [`GaussianActivation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GaussianVar {
    pub mean: Var,
    pub var: Var,
}

impl GaussianVar {
    pub fn constant(tape: &mut Tape, g: &GaussianActivation) -> Self {
        Self {
            mean: tape.constant(g.mean.clone()),
            var: tape.constant(g.var.clone()),
        }
    }

    pub fn value(&self, tape: &Tape) -> GaussianActivation {
        GaussianActivation {
            mean: tape.value(self.mean).clone(),
            var: tape.value(self.var).clone(),
        }
    }
}

/// Per-weight Gaussian parameters of one layer.
///
/// Dense weights are stored `[fan_in, fan_out]`; convolution kernels
/// `[out_channels, in_channels, kh, kw]`. Bias tensors have one entry per
/// output unit or channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightDistribution {
    pub mean: Tensor,
    pub log_var: Tensor,
    pub bias: Option<BiasDistribution>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasDistribution {
    pub mean: Tensor,
    pub log_var: Tensor,
}

impl WeightDistribution {
    pub fn new(mean: Tensor, log_var: Tensor, bias: Option<BiasDistribution>) -> Result<Self> {
        if mean.shape() != log_var.shape() {
            return Err(Error::ShapeMismatch {
                op: "weight_distribution",
                lhs: mean.shape().to_vec(),
                rhs: log_var.shape().to_vec(),
            });
        }
        if let Some(b) = &bias {
            if b.mean.shape() != b.log_var.shape() {
                return Err(Error::ShapeMismatch {
                    op: "weight_distribution",
                    lhs: b.mean.shape().to_vec(),
                    rhs: b.log_var.shape().to_vec(),
                });
            }
        }
        Ok(Self { mean, log_var, bias })
    }

    /// σ² = exp(ρ).
    pub fn variance(&self) -> Tensor {
        self.log_var.map(f64::exp)
    }
}

/// A layer's weight distribution on a tape, with σ² already formed.
#[derive(Clone, Copy, Debug)]
pub struct WeightVars {
    pub mean: Var,
    pub var: Var,
    pub bias: Option<GaussianVar>,
}

impl WeightVars {
    /// Build from tape nodes holding μ and ρ (parameters or constants).
    pub fn from_log_var(tape: &mut Tape, mean: Var, log_var: Var, bias: Option<(Var, Var)>) -> Result<Self> {
        let var = tape.exp(log_var)?;
        let bias = match bias {
            Some((m, lv)) => Some(GaussianVar {
                mean: m,
                var: tape.exp(lv)?,
            }),
            None => None,
        };
        Ok(Self { mean, var, bias })
    }

    pub fn constant(tape: &mut Tape, w: &WeightDistribution) -> Result<Self> {
        let mean = tape.constant(w.mean.clone());
        let log_var = tape.constant(w.log_var.clone());
        let bias = w
            .bias
            .as_ref()
            .map(|b| (tape.constant(b.mean.clone()), tape.constant(b.log_var.clone())));
        Self::from_log_var(tape, mean, log_var, bias)
    }
}

fn check_nonnegative(tape: &Tape, v: Var, op: &'static str) -> Result<()> {
    if tape.value(v).data().iter().any(|&x| x < 0.0) {
        return Err(Error::domain(op, "negative input variance"));
    }
    Ok(())
}

fn add_dense_bias(tape: &mut Tape, out: GaussianVar, bias: Option<GaussianVar>) -> Result<GaussianVar> {
    let Some(b) = bias else { return Ok(out) };
    let rows = tape.value(out.mean).shape()[0];
    let bm = tape.broadcast_rows(b.mean, rows)?;
    let bv = tape.broadcast_rows(b.var, rows)?;
    Ok(GaussianVar {
        mean: tape.add(out.mean, bm)?,
        var: tape.add(out.var, bv)?,
    })
}

fn add_conv_bias(tape: &mut Tape, out: GaussianVar, bias: Option<GaussianVar>) -> Result<GaussianVar> {
    let Some(b) = bias else { return Ok(out) };
    let shape = tape.value(out.mean).shape().to_vec();
    let (batch, ch, spatial) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut expand = |v: Var| -> Result<Var> {
        let per_channel = tape.broadcast_cols(v, spatial)?;
        let tiled = tape.tile(per_channel, batch)?;
        debug_assert_eq!(tape.value(tiled).shape(), &[batch * ch, spatial]);
        tape.reshape(tiled, &shape)
    };
    let bm = expand(b.mean)?;
    let bv = expand(b.var)?;
    Ok(GaussianVar {
        mean: tape.add(out.mean, bm)?,
        var: tape.add(out.var, bv)?,
    })
}

/// First dense layer: the input `x: [B, K]` is a constant, so
/// `E[f] = x·μ` and `Var[f] = x²·σ²`.
pub fn input_moments(tape: &mut Tape, w: &WeightVars, x: Var) -> Result<GaussianVar> {
    let mean = tape.matmul(x, w.mean)?;
    let x2 = tape.square(x)?;
    let var = tape.matmul(x2, w.var)?;
    add_dense_bias(tape, GaussianVar { mean, var }, w.bias)
}

/// Dense layer on a Gaussian input `h: [B, K]`.
pub fn dense_moments(tape: &mut Tape, w: &WeightVars, h: GaussianVar) -> Result<GaussianVar> {
    check_nonnegative(tape, h.var, "dense_moments")?;
    let mean = tape.matmul(h.mean, w.mean)?;
    let mu2 = tape.square(w.mean)?;
    let second = tape.add(mu2, w.var)?;
    let hm2 = tape.square(h.mean)?;
    let a = tape.matmul(h.var, second)?;
    let b = tape.matmul(hm2, w.var)?;
    let var = tape.add(a, b)?;
    add_dense_bias(tape, GaussianVar { mean, var }, w.bias)
}

/// Valid strided convolution on a constant input `x: [B, C, H, W]`.
pub fn conv2d_input_moments(tape: &mut Tape, w: &WeightVars, x: Var, stride: usize) -> Result<GaussianVar> {
    let mean = tape.conv2d(x, w.mean, stride)?;
    let x2 = tape.square(x)?;
    let var = tape.conv2d(x2, w.var, stride)?;
    add_conv_bias(tape, GaussianVar { mean, var }, w.bias)
}

/// Valid strided convolution on a Gaussian input `h: [B, C, H, W]`; the
/// dense formulas applied per receptive field.
pub fn conv2d_moments(tape: &mut Tape, w: &WeightVars, h: GaussianVar, stride: usize) -> Result<GaussianVar> {
    check_nonnegative(tape, h.var, "conv2d_moments")?;
    let mean = tape.conv2d(h.mean, w.mean, stride)?;
    let mu2 = tape.square(w.mean)?;
    let second = tape.add(mu2, w.var)?;
    let hm2 = tape.square(h.mean)?;
    let a = tape.conv2d(h.var, second, stride)?;
    let b = tape.conv2d(hm2, w.var, stride)?;
    let var = tape.add(a, b)?;
    add_conv_bias(tape, GaussianVar { mean, var }, w.bias)
}

/// Moments of `act(f)` for `f ~ N(mean, var)` elementwise.
pub fn activation_moments(tape: &mut Tape, act: Activation, f: GaussianVar) -> Result<GaussianVar> {
    if let Activation::Elu { alpha } = act {
        if !(alpha >= 0.0) {
            return Err(Error::domain("elu_moments", format!("alpha must be >= 0, got {alpha}")));
        }
    }
    if act == Activation::Identity {
        return Ok(f);
    }
    Ok(GaussianVar {
        mean: tape.act_moment(act, MomentPart::Mean, f.mean, f.var)?,
        var: tape.act_moment(act, MomentPart::Var, f.mean, f.var)?,
    })
}

pub fn relu_moments(tape: &mut Tape, f: GaussianVar) -> Result<GaussianVar> {
    activation_moments(tape, Activation::Relu, f)
}

pub fn elu_moments(tape: &mut Tape, f: GaussianVar, alpha: f64) -> Result<GaussianVar> {
    activation_moments(tape, Activation::Elu { alpha }, f)
}

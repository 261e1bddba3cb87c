//! Layer stacks of Gaussian-weight layers and their moment-matched forward pass.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::moments::{
    activation_moments, conv2d_input_moments, conv2d_moments, dense_moments, input_moments, BiasDistribution,
    GaussianActivation, GaussianVar, WeightDistribution, WeightVars,
};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        fan_in: usize,
        fan_out: usize,
    },
    /// Valid (unpadded) convolution with a square kernel.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
    #[serde(default = "default_true")]
    pub bias: bool,
}

fn default_true() -> bool {
    true
}

impl LayerSpec {
    pub fn dense(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense { fan_in, fan_out },
            activation,
            bias: true,
        }
    }

    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
    ) -> Self {
        Self {
            kind: LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            },
            activation,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Dense { fan_in, fan_out } => vec![fan_in, fan_out],
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![out_channels, in_channels, kernel, kernel],
        }
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Dense { fan_in, .. } => fan_in,
            LayerKind::Conv2d {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
        }
    }

    pub fn units_out(&self) -> usize {
        match self.kind {
            LayerKind::Dense { fan_out, .. } => fan_out,
            LayerKind::Conv2d { out_channels, .. } => out_channels,
        }
    }
}

/// Per-datum input shape plus the layer chain. A dense layer after a
/// convolution flattens its input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Dense chain `input → hidden… → output`; hidden layers use `activation`,
    /// the output layer is linear.
    pub fn mlp(input: usize, hidden: &[usize], output: usize, activation: Activation) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { Activation::Identity } else { activation };
                LayerSpec::dense(widths[i], widths[i + 1], act)
            })
            .collect();
        Self {
            input_shape: vec![input],
            layers,
        }
    }

    /// LeNet-style net on 1×28×28 images with strided convolutions in place of
    /// pooling: conv 5×5/2 (20) → conv 5×5/2 (50) → dense 500 → dense `classes`.
    pub fn lenet_strided(classes: usize) -> Self {
        Self {
            input_shape: vec![1, 28, 28],
            layers: vec![
                LayerSpec::conv2d(1, 20, 5, 2, Activation::Relu),
                LayerSpec::conv2d(20, 50, 5, 2, Activation::Relu),
                LayerSpec::dense(50 * 4 * 4, 500, Activation::Relu),
                LayerSpec::dense(500, classes, Activation::Identity),
            ],
        }
    }

    /// Per-datum output shape of every layer; errors on an inconsistent chain.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match layer.kind {
                LayerKind::Dense { fan_in, fan_out } => {
                    let width: usize = shape.iter().product();
                    if width != fan_in {
                        return Err(Error::Config(format!(
                            "layer {i}: dense fan_in {fan_in} but input has {width} units"
                        )));
                    }
                    vec![fan_out]
                }
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                } => {
                    let &[c, h, w] = shape.as_slice() else {
                        return Err(Error::Config(format!(
                            "layer {i}: convolution needs a [C, H, W] input, got {shape:?}"
                        )));
                    };
                    if c != in_channels {
                        return Err(Error::Config(format!(
                            "layer {i}: expected {in_channels} channels, got {c}"
                        )));
                    }
                    if stride < 1 || kernel < 1 || kernel > h || kernel > w {
                        return Err(Error::Config(format!(
                            "layer {i}: kernel {kernel} stride {stride} invalid for {h}x{w}"
                        )));
                    }
                    vec![out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
                }
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_dim(&self) -> Result<usize> {
        Ok(self.layer_shapes()?.last().map_or(0, |s| s.iter().product()))
    }
}

/// Initial values for the weight distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// Mean and variance of the normal the log-variances ρ are drawn from.
    pub log_var_mean: f64,
    pub log_var_var: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            log_var_mean: -9.0,
            log_var_var: 0.001,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w_mean: ParamId,
    pub w_log_var: ParamId,
    pub bias: Option<(ParamId, ParamId)>,
}

/// A network spec together with its trainable weight distributions.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    pub store: ParamStore,
    layers: Vec<LayerParams>,
}

impl Network {
    /// He-normal means (std √(2/fan_in)), zero bias means, and log-variances
    /// drawn from `N(init.log_var_mean, init.log_var_var)`.
    pub fn init(spec: NetworkSpec, init: &InitConfig, rng: &mut SeededRng) -> Result<Self> {
        spec.layer_shapes()?;
        if !(init.log_var_var >= 0.0) {
            return Err(Error::Config("log_var_var must be >= 0".into()));
        }
        let rho_std = init.log_var_var.sqrt();
        let dists = spec
            .layers
            .iter()
            .map(|layer| {
                let shape = layer.weight_shape();
                let n: usize = shape.iter().product();
                let std = (2.0 / layer.fan_in() as f64).sqrt();
                let mean = (0..n).map(|_| rng.normal(0.0, std)).collect();
                let log_var = (0..n).map(|_| rng.normal(init.log_var_mean, rho_std)).collect();
                let bias = layer.bias.then(|| {
                    let units = layer.units_out();
                    BiasDistribution {
                        mean: Tensor::zeros(&[units]),
                        log_var: Tensor::vector((0..units).map(|_| rng.normal(init.log_var_mean, rho_std)).collect()),
                    }
                });
                WeightDistribution::new(Tensor::new(shape.clone(), mean)?, Tensor::new(shape, log_var)?, bias)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_distributions(spec, dists)
    }

    pub fn from_distributions(spec: NetworkSpec, dists: Vec<WeightDistribution>) -> Result<Self> {
        spec.layer_shapes()?;
        if dists.len() != spec.layers.len() {
            return Err(Error::Config(format!(
                "{} layers but {} weight distributions",
                spec.layers.len(),
                dists.len()
            )));
        }
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(dists.len());
        for (i, (layer, d)) in spec.layers.iter().zip(dists).enumerate() {
            let want = layer.weight_shape();
            if d.mean.shape() != want.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "network",
                    lhs: want,
                    rhs: d.mean.shape().to_vec(),
                });
            }
            let units = layer.units_out();
            match (&d.bias, layer.bias) {
                (Some(b), true) if b.mean.shape() == [units] => {}
                (None, false) => {}
                _ => {
                    return Err(Error::Config(format!(
                        "layer {i}: bias distribution does not match the layer spec"
                    )))
                }
            }
            let w_mean = store.add(format!("layer{i}.w_mean"), d.mean);
            let w_log_var = store.add(format!("layer{i}.w_log_var"), d.log_var);
            let bias = d.bias.map(|b| {
                (
                    store.add(format!("layer{i}.b_mean"), b.mean),
                    store.add(format!("layer{i}.b_log_var"), b.log_var),
                )
            });
            layers.push(LayerParams {
                w_mean,
                w_log_var,
                bias,
            });
        }
        Ok(Self { spec, store, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layer_params(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn distribution(&self, layer: usize) -> WeightDistribution {
        let p = self.layers[layer];
        WeightDistribution {
            mean: self.store.value(p.w_mean).clone(),
            log_var: self.store.value(p.w_log_var).clone(),
            bias: p.bias.map(|(m, lv)| BiasDistribution {
                mean: self.store.value(m).clone(),
                log_var: self.store.value(lv).clone(),
            }),
        }
    }

    pub fn distributions(&self) -> Vec<WeightDistribution> {
        (0..self.layers.len()).map(|i| self.distribution(i)).collect()
    }

    /// Every (μ, ρ) pair (weights and biases) as parameter leaves on `tape`.
    pub fn mean_log_var_vars(&self, tape: &mut Tape) -> Vec<(Var, Var)> {
        let mut out = Vec::new();
        for p in &self.layers {
            out.push((tape.param(&self.store, p.w_mean), tape.param(&self.store, p.w_log_var)));
            if let Some((m, lv)) = p.bias {
                out.push((tape.param(&self.store, m), tape.param(&self.store, lv)));
            }
        }
        out
    }

    /// Moment-matched output for a batch `x: [B, input_dim]`.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<GaussianVar> {
        let (batch, d) = x.dims2()?;
        if d != self.spec.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: vec![batch, self.spec.input_dim()],
                rhs: x.shape().to_vec(),
            });
        }
        let mut h: Option<GaussianVar> = None;
        let mut shape = self.spec.input_shape.clone();
        for (layer, p) in self.spec.layers.iter().zip(&self.layers) {
            let mean = tape.param(&self.store, p.w_mean);
            let log_var = tape.param(&self.store, p.w_log_var);
            let bias = p
                .bias
                .map(|(m, lv)| (tape.param(&self.store, m), tape.param(&self.store, lv)));
            let w = WeightVars::from_log_var(tape, mean, log_var, bias)?;

            let mut full = vec![batch];
            full.extend_from_slice(&shape);
            let f = match layer.kind {
                LayerKind::Dense { fan_in, .. } => {
                    let flat = [batch, fan_in];
                    match h {
                        None => {
                            let xv = tape.constant(x.reshape(&flat)?);
                            input_moments(tape, &w, xv)?
                        }
                        Some(g) => {
                            let g = GaussianVar {
                                mean: tape.reshape(g.mean, &flat)?,
                                var: tape.reshape(g.var, &flat)?,
                            };
                            dense_moments(tape, &w, g)?
                        }
                    }
                }
                LayerKind::Conv2d { stride, .. } => match h {
                    None => {
                        let xv = tape.constant(x.reshape(&full)?);
                        conv2d_input_moments(tape, &w, xv, stride)?
                    }
                    Some(g) => conv2d_moments(tape, &w, g, stride)?,
                },
            };
            let out_shape = tape.value(f.mean).shape()[1..].to_vec();
            shape = out_shape;
            h = Some(activation_moments(tape, layer.activation, f)?);
        }
        let g = h.expect("network has at least one layer");
        let width: usize = shape.iter().product();
        Ok(GaussianVar {
            mean: tape.reshape(g.mean, &[batch, width])?,
            var: tape.reshape(g.var, &[batch, width])?,
        })
    }

    /// Output moments for `x: [B, input_dim]` without keeping the tape.
    pub fn predict(&self, x: &Tensor) -> Result<GaussianActivation> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, x)?;
        Ok(out.value(&tape))
    }
}

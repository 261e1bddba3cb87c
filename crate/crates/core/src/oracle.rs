//! Brute-force reference computations: weight sampling, quadrature, and
//! simulation. Nothing here uses the moment formulas or the tape, so these
//! routines can serve as independent checks of them.

use serde::Serialize;

use crate::autodiff::Activation;
use crate::error::{Error, Result};
use crate::moments::WeightDistribution;
use crate::network::{LayerKind, NetworkSpec};
use crate::rng::SeededRng;
use crate::special::{logsumexp, normal_pdf};

/// Sample moments of each network output with their standard errors.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentEstimate {
    pub n: usize,
    pub mean: Vec<f64>,
    /// Sample variance (divisor n − 1).
    pub var: Vec<f64>,
    pub mean_se: Vec<f64>,
    /// Large-sample standard error of the variance, √((m₄ − m₂²)/n).
    pub var_se: Vec<f64>,
    pub skewness: Vec<f64>,
    pub excess_kurtosis: Vec<f64>,
}

/// Log of a Monte-Carlo mean likelihood with a delta-method standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MarginalEstimate {
    pub n: usize,
    pub log_marginal: f64,
    pub se: f64,
}

pub fn activate(act: Activation, x: f64) -> f64 {
    match act {
        Activation::Identity => x,
        Activation::Relu => x.max(0.0),
        Activation::Elu { alpha } => {
            if x > 0.0 {
                x
            } else {
                alpha * x.exp_m1()
            }
        }
    }
}

/// Concrete weights of one layer drawn from its distribution.
struct DrawnLayer {
    w: Vec<f64>,
    b: Option<Vec<f64>>,
}

fn draw(dists: &[WeightDistribution], rng: &mut SeededRng, out: &mut Vec<DrawnLayer>) {
    out.clear();
    for d in dists {
        let w = d
            .mean
            .data()
            .iter()
            .zip(d.log_var.data())
            .map(|(&m, &lv)| m + (0.5 * lv).exp() * rng.standard_normal())
            .collect();
        let b = d.bias.as_ref().map(|b| {
            b.mean
                .data()
                .iter()
                .zip(b.log_var.data())
                .map(|(&m, &lv)| m + (0.5 * lv).exp() * rng.standard_normal())
                .collect()
        });
        out.push(DrawnLayer { w, b });
    }
}

/// Ordinary forward pass of one datum with fixed weights.
fn run(spec: &NetworkSpec, layers: &[DrawnLayer], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut shape = spec.input_shape.clone();
    for (layer, wl) in spec.layers.iter().zip(layers) {
        let out = match layer.kind {
            LayerKind::Dense { fan_in, fan_out } => {
                let mut f = vec![0.0; fan_out];
                for (k, &hk) in h.iter().enumerate().take(fan_in) {
                    let row = &wl.w[k * fan_out..(k + 1) * fan_out];
                    for (fj, &w) in f.iter_mut().zip(row) {
                        *fj += w * hk;
                    }
                }
                if let Some(b) = &wl.b {
                    for (fj, bj) in f.iter_mut().zip(b) {
                        *fj += bj;
                    }
                }
                shape = vec![fan_out];
                f
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                let (hh, ww) = (shape[1], shape[2]);
                let (oh, ow) = ((hh - kernel) / stride + 1, (ww - kernel) / stride + 1);
                let mut f = vec![0.0; out_channels * oh * ow];
                for o in 0..out_channels {
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut acc = wl.b.as_ref().map_or(0.0, |b| b[o]);
                            for c in 0..in_channels {
                                for p in 0..kernel {
                                    for q in 0..kernel {
                                        acc += wl.w[((o * in_channels + c) * kernel + p) * kernel + q]
                                            * h[(c * hh + i * stride + p) * ww + j * stride + q];
                                    }
                                }
                            }
                            f[(o * oh + i) * ow + j] = acc;
                        }
                    }
                }
                shape = vec![out_channels, oh, ow];
                f
            }
        };
        h = out.into_iter().map(|v| activate(layer.activation, v)).collect();
    }
    h
}

fn check_inputs(spec: &NetworkSpec, dists: &[WeightDistribution], x: &[f64], n: usize) -> Result<()> {
    spec.layer_shapes()?;
    if dists.len() != spec.layers.len() {
        return Err(Error::Config("one weight distribution per layer required".into()));
    }
    if x.len() != spec.input_dim() {
        return Err(Error::shape(
            "oracle",
            format!("input has {} values, network expects {}", x.len(), spec.input_dim()),
        ));
    }
    if n < 2 {
        return Err(Error::Config("need at least 2 samples".into()));
    }
    Ok(())
}

/// Summary statistics of equally weighted samples.
pub fn summarize(samples: &[f64]) -> (f64, f64, f64, f64, f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &s in samples {
        let d = s - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    let var = m2 * n / (n - 1.0);
    let mean_se = (var / n).sqrt();
    let var_se = ((m4 - m2 * m2).max(0.0) / n).sqrt();
    let (skew, kurt) = if m2 > 0.0 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    } else {
        (0.0, 0.0)
    };
    (mean, var, mean_se, var_se, skew, kurt)
}

/// Draw `n` weight sets, push `x` (one datum) through each, and summarize
/// the outputs.
pub fn sample_forward(
    spec: &NetworkSpec,
    dists: &[WeightDistribution],
    x: &[f64],
    rng: &mut SeededRng,
    n: usize,
) -> Result<MomentEstimate> {
    check_inputs(spec, dists, x, n)?;
    let width = spec.output_dim()?;
    let mut outputs = vec![Vec::with_capacity(n); width];
    let mut layers = Vec::new();
    for _ in 0..n {
        draw(dists, rng, &mut layers);
        for (o, v) in outputs.iter_mut().zip(run(spec, &layers, x)) {
            o.push(v);
        }
    }
    let mut est = MomentEstimate {
        n,
        mean: Vec::new(),
        var: Vec::new(),
        mean_se: Vec::new(),
        var_se: Vec::new(),
        skewness: Vec::new(),
        excess_kurtosis: Vec::new(),
    };
    for o in &outputs {
        let (mean, var, mse, vse, skew, kurt) = summarize(o);
        est.mean.push(mean);
        est.var.push(var);
        est.mean_se.push(mse);
        est.var_se.push(vse);
        est.skewness.push(skew);
        est.excess_kurtosis.push(kurt);
    }
    Ok(est)
}

/// Per-output skewness and excess kurtosis of the sampled network output.
pub fn gaussian_normality_probe(
    spec: &NetworkSpec,
    dists: &[WeightDistribution],
    x: &[f64],
    rng: &mut SeededRng,
    n: usize,
) -> Result<Vec<(f64, f64)>> {
    let est = sample_forward(spec, dists, x, rng, n)?;
    Ok(est.skewness.into_iter().zip(est.excess_kurtosis).collect())
}

/// Observation model for [`sample_marginal_likelihood`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    /// Two output units `(f₁, f₂)`: `λ ~ N(f₁, exp f₂)`, `y ~ N(λ, 1/β)`.
    Regression { y: f64, beta: f64 },
    /// `p(y = c | f) = softmax(clamp(f))_c`.
    Classification { label: usize, logit_clamp: f64 },
}

fn log_likelihood(target: Target, f: &[f64]) -> Result<f64> {
    match target {
        Target::Regression { y, beta } => {
            if f.len() != 2 {
                return Err(Error::shape("oracle", "regression needs 2 outputs"));
            }
            Ok(crate::special::normal_log_density(y, f[0], 1.0 / beta + f[1].exp()))
        }
        Target::Classification { label, logit_clamp } => {
            if label >= f.len() {
                return Err(Error::domain("oracle", "label out of range"));
            }
            let z: Vec<f64> = f.iter().map(|v| v.clamp(-logit_clamp, logit_clamp)).collect();
            Ok(z[label] - logsumexp(&z))
        }
    }
}

/// `log((1/n) Σᵢ exp ℓᵢ)` and the delta-method SE `sd(exp ℓ) / (√n · mean(exp ℓ))`.
pub fn log_mean_exp_with_se(log_liks: &[f64]) -> Result<MarginalEstimate> {
    let n = log_liks.len();
    let max = log_liks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numerical("every sampled likelihood underflowed to zero".into()));
    }
    let scaled: Vec<f64> = log_liks.iter().map(|l| (l - max).exp()).collect();
    let (mean, var, ..) = summarize(&scaled);
    Ok(MarginalEstimate {
        n,
        log_marginal: max + mean.ln(),
        se: (var / n as f64).sqrt() / mean,
    })
}

/// Monte-Carlo estimate of `log ∫ p(y | x, w) p(w) dw` by weight sampling.
pub fn sample_marginal_likelihood(
    spec: &NetworkSpec,
    dists: &[WeightDistribution],
    x: &[f64],
    target: Target,
    rng: &mut SeededRng,
    n: usize,
) -> Result<MarginalEstimate> {
    check_inputs(spec, dists, x, n)?;
    let mut layers = Vec::new();
    let mut lls = Vec::with_capacity(n);
    for _ in 0..n {
        draw(dists, rng, &mut layers);
        lls.push(log_likelihood(target, &run(spec, &layers, x))?);
    }
    log_mean_exp_with_se(&lls)
}

/// Two-stage simulation of the regression predictive density at `y` given
/// output moments: draw `f ~ N(m, diag s²)`, then integrate `λ ~ N(f₁, exp f₂)`
/// against `N(y | λ, 1/β)` in closed form.
pub fn regression_marginal_from_moments(
    mean: [f64; 2],
    var: [f64; 2],
    y: f64,
    beta: f64,
    rng: &mut SeededRng,
    n: usize,
) -> Result<MarginalEstimate> {
    let sd = [var[0].sqrt(), var[1].sqrt()];
    let lls: Vec<f64> = (0..n)
        .map(|_| {
            let f1 = mean[0] + sd[0] * rng.standard_normal();
            let f2 = mean[1] + sd[1] * rng.standard_normal();
            crate::special::normal_log_density(y, f1, 1.0 / beta + f2.exp())
        })
        .collect();
    log_mean_exp_with_se(&lls)
}

/// Fully sampled two-stage simulation: draw `f ~ N(m, diag s²)`, then
/// `λ ~ N(f₁, exp f₂)`, then `y ~ N(λ, 1/β)`, and estimate the density at
/// `y` with a Gaussian kernel of Silverman bandwidth `1.06 · sd · n^(−1/5)`.
/// The standard error is that of the kernel average, carried to log scale.
pub fn regression_marginal_kde(
    mean: [f64; 2],
    var: [f64; 2],
    y: f64,
    beta: f64,
    rng: &mut SeededRng,
    n: usize,
) -> Result<MarginalEstimate> {
    if n < 2 {
        return Err(Error::Config("need at least 2 samples".into()));
    }
    let sd = [var[0].sqrt(), var[1].sqrt()];
    let noise = beta.recip().sqrt();
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            let f1 = mean[0] + sd[0] * rng.standard_normal();
            let f2 = mean[1] + sd[1] * rng.standard_normal();
            let lambda = f1 + (0.5 * f2).exp() * rng.standard_normal();
            lambda + noise * rng.standard_normal()
        })
        .collect();
    let (_, v, ..) = summarize(&draws);
    let h = 1.06 * v.sqrt() * (n as f64).powf(-0.2);
    let k: Vec<f64> = draws.iter().map(|d| normal_pdf((y - d) / h) / h).collect();
    let (dens, kv, ..) = summarize(&k);
    if !(dens > 0.0) {
        return Err(Error::Numerical("kernel density estimate is zero at y".into()));
    }
    Ok(MarginalEstimate {
        n,
        log_marginal: dens.ln(),
        se: (kv / n as f64).sqrt() / dens,
    })
}

/// Tensor-product Gauss-Hermite estimate of `E[g(f)]` for
/// `f ~ N(mean, diag var)`, with `nodes` points per dimension. At most 4
/// dimensions.
pub fn gauss_hermite_expectation(mean: &[f64], var: &[f64], nodes: usize, g: impl Fn(&[f64]) -> f64) -> Result<f64> {
    let d = mean.len();
    if d == 0 || d > 4 || var.len() != d {
        return Err(Error::shape("gauss_hermite", "need 1 to 4 matching dimensions"));
    }
    let n = std::num::NonZeroUsize::new(nodes).ok_or_else(|| Error::Config("need at least one node".into()))?;
    let rule = gauss_quad::hermite::GaussHermite::new(n);
    let pairs = rule.as_node_weight_pairs();
    let norm = std::f64::consts::PI.sqrt();
    let scale: Vec<f64> = var.iter().map(|v| (2.0 * v).sqrt()).collect();
    let mut idx = vec![0usize; d];
    let mut point = vec![0.0; d];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for k in 0..d {
            let (t, wt) = pairs[idx[k]];
            point[k] = mean[k] + scale[k] * t;
            w *= wt / norm;
        }
        total += w * g(&point);
        let mut k = 0;
        loop {
            idx[k] += 1;
            if idx[k] < nodes {
                break;
            }
            idx[k] = 0;
            k += 1;
            if k == d {
                return Ok(total);
            }
        }
    }
}

/// `log E[softmax(clamp f)_label]` for `f ~ N(mean, diag var)` by Gauss-Hermite.
pub fn classification_marginal_quadrature(
    mean: &[f64],
    var: &[f64],
    label: usize,
    logit_clamp: f64,
    nodes: usize,
) -> Result<f64> {
    if label >= mean.len() {
        return Err(Error::domain(
            "classification_marginal_quadrature",
            "label out of range",
        ));
    }
    let p = gauss_hermite_expectation(mean, var, nodes, |f| {
        let z: Vec<f64> = f.iter().map(|v| v.clamp(-logit_clamp, logit_clamp)).collect();
        (z[label] - logsumexp(&z)).exp()
    })?;
    Ok(p.ln())
}

/// Mean and variance of `act(f)` for `f ~ N(m, v)` by adaptive
/// (double-exponential) quadrature in standardized coordinates, split at the
/// activation's kink.
pub fn quadrature_activation_moments(act: Activation, m: f64, v: f64) -> (f64, f64) {
    if v == 0.0 {
        return (activate(act, m), 0.0);
    }
    let s = v.sqrt();
    const L: f64 = 40.0;
    let kink = -m / s;
    let mut cuts = vec![-L, -10.0, -4.0, 0.0, 4.0, 10.0, L];
    if kink > -L && kink < L {
        cuts.push(kink);
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    // Piecewise, so the double-exponential rule cannot skip the bulk near z = 0.
    let integrate = |g: &dyn Fn(f64) -> f64| -> f64 {
        let f = |z: f64| g(m + s * z) * normal_pdf(z);
        cuts.windows(2)
            .map(|w| quadrature::integrate(f, w[0], w[1], 1e-14).integral)
            .sum()
    };
    let mean = integrate(&|x| activate(act, x));
    let var = integrate(&|x| (activate(act, x) - mean).powi(2));
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn gauss_hermite_polynomial_moments() {
        let m = gauss_hermite_expectation(&[1.5], &[4.0], 20, |f| f[0] * f[0]).unwrap();
        assert!((m - (1.5 * 1.5 + 4.0)).abs() < 1e-12);
        let m = gauss_hermite_expectation(&[1.0, -2.0], &[0.5, 2.0], 10, |f| f[0] * f[1]).unwrap();
        assert!((m + 2.0).abs() < 1e-12);
        assert!(gauss_hermite_expectation(&[0.0; 5], &[1.0; 5], 3, |_| 1.0).is_err());
    }

    #[test]
    fn quadrature_relu_reference() {
        let (m, v) = quadrature_activation_moments(Activation::Relu, 0.0, 1.0);
        let inv_2pi = 1.0 / (2.0 * std::f64::consts::PI);
        assert!((m - inv_2pi.sqrt()).abs() < 1e-12);
        assert!((v - (0.5 - inv_2pi)).abs() < 1e-12);
    }

    #[test]
    fn deterministic_weights_give_zero_variance() {
        let spec = NetworkSpec::mlp(2, &[3], 1, Activation::Relu);
        let dists = vec![
            WeightDistribution::new(
                Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.0, 0.3, -0.7]).unwrap(),
                Tensor::full(&[2, 3], f64::NEG_INFINITY),
                Some(crate::moments::BiasDistribution {
                    mean: Tensor::vector(vec![0.1, 0.2, 0.3]),
                    log_var: Tensor::full(&[3], f64::NEG_INFINITY),
                }),
            )
            .unwrap(),
            WeightDistribution::new(
                Tensor::new(vec![3, 1], vec![1.0, -2.0, 0.5]).unwrap(),
                Tensor::full(&[3, 1], f64::NEG_INFINITY),
                Some(crate::moments::BiasDistribution {
                    mean: Tensor::vector(vec![0.0]),
                    log_var: Tensor::full(&[1], f64::NEG_INFINITY),
                }),
            )
            .unwrap(),
        ];
        let x = [1.0, 2.0];
        let est = sample_forward(&spec, &dists, &x, &mut SeededRng::new(0, 0), 100).unwrap();
        // hidden: [0.5+2+0.1, -1+0.6+0.2, 2-1.4+0.3] = [2.6, -0.2, 0.9] → relu [2.6, 0, 0.9]
        let want = 2.6 - 0.0 + 0.45;
        assert!((est.mean[0] - want).abs() < 1e-12);
        assert!(est.var[0] < 1e-25);
    }

    #[test]
    fn underflow_is_reported() {
        assert!(matches!(
            log_mean_exp_with_se(&[f64::NEG_INFINITY; 3]),
            Err(Error::Numerical(_))
        ));
    }
}

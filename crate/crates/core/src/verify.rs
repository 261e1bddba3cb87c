//! Analytic-versus-oracle comparisons: moment propagation against weight
//! sampling, activation moments against quadrature, and the two head
//! marginals against simulation and Gauss-Hermite quadrature.

use serde::Serialize;

use crate::autodiff::{gaussian_act_moments, Activation, Tape};
use crate::error::Result;
use crate::heads::{
    classification_log_marginal, regression_log_marginal, ClassificationHeadConfig, RegressionHeadConfig,
};
use crate::moments::{GaussianActivation, GaussianVar, WeightDistribution};
use crate::network::{InitConfig, Network, NetworkSpec};
use crate::oracle::{
    classification_marginal_quadrature, quadrature_activation_moments, regression_marginal_kde, sample_forward,
};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// One output unit of a moment-propagation check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OutputCheck {
    pub mm_mean: f64,
    pub mc_mean: f64,
    pub mean_se: f64,
    pub mm_var: f64,
    pub mc_var: f64,
    pub var_se: f64,
}

impl OutputCheck {
    /// `|mm − mc|` in units of the Monte-Carlo standard error.
    pub fn mean_z(&self) -> f64 {
        let d = (self.mm_mean - self.mc_mean).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.mean_se
        }
    }

    pub fn var_rel_err(&self) -> f64 {
        if self.mm_var == self.mc_var {
            0.0
        } else {
            (self.mm_var / self.mc_var - 1.0).abs()
        }
    }

    pub fn passes(&self, mean_se_tol: f64, var_rel_tol: f64) -> bool {
        self.mean_z() <= mean_se_tol && self.var_rel_err() <= var_rel_tol
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentCase {
    pub case: usize,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub outputs: Vec<OutputCheck>,
}

impl MomentCase {
    pub fn passes(&self, mean_se_tol: f64, var_rel_tol: f64) -> bool {
        self.outputs.iter().all(|o| o.passes(mean_se_tol, var_rel_tol))
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }
}

/// Random dense net with 1 to 3 layers of width ≤ 16, ReLU or ELU hidden
/// units, standard initialization, and a standard-normal input.
pub fn random_case(rng: &mut SeededRng) -> Result<(NetworkSpec, Vec<WeightDistribution>, Vec<f64>)> {
    let depth = 1 + rng.below(3) as usize;
    let widths: Vec<usize> = (0..=depth).map(|_| 1 + rng.below(16) as usize).collect();
    let act = if rng.below(2) == 0 {
        Activation::Relu
    } else {
        Activation::Elu { alpha: 1.0 }
    };
    let spec = NetworkSpec::mlp(widths[0], &widths[1..depth], widths[depth], act);
    let net = Network::init(spec.clone(), &InitConfig::default(), rng)?;
    let x = (0..widths[0]).map(|_| rng.standard_normal()).collect();
    Ok((spec, net.distributions(), x))
}

/// Moment-matched forward pass of one datum, outside any training tape.
pub fn moment_forward(spec: &NetworkSpec, dists: &[WeightDistribution], x: &[f64]) -> Result<GaussianActivation> {
    let net = Network::from_distributions(spec.clone(), dists.to_vec())?;
    net.predict(&Tensor::new(vec![1, x.len()], x.to_vec())?)
}

/// `cases` random architectures, each compared against `draws` weight samples.
pub fn moment_oracle_cases(cases: usize, draws: usize, seed: u64) -> Result<Vec<MomentCase>> {
    let mut gen = SeededRng::new(seed, 100);
    (0..cases)
        .map(|case| {
            let (spec, dists, x) = random_case(&mut gen)?;
            let mm = moment_forward(&spec, &dists, &x)?;
            let mc = sample_forward(&spec, &dists, &x, &mut SeededRng::new(seed, 200 + case as u64), draws)?;
            let outputs = (0..mc.mean.len())
                .map(|k| OutputCheck {
                    mm_mean: mm.mean.data()[k],
                    mc_mean: mc.mean[k],
                    mean_se: mc.mean_se[k],
                    mm_var: mm.var.data()[k],
                    mc_var: mc.var[k],
                    var_se: mc.var_se[k],
                })
                .collect();
            let mut widths = vec![spec.input_dim()];
            widths.extend(spec.layers.iter().map(|l| l.units_out()));
            Ok(MomentCase {
                case,
                widths,
                activation: spec.layers[0].activation,
                outputs,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ActivationCheck {
    pub activation: Activation,
    pub mu: f64,
    pub sigma: f64,
    pub mean: f64,
    pub var: f64,
    pub quad_mean: f64,
    pub quad_var: f64,
}

impl ActivationCheck {
    pub fn max_abs_err(&self) -> f64 {
        (self.mean - self.quad_mean).abs().max((self.var - self.quad_var).abs())
    }
}

/// ReLU and ELU(1) moments on `μ ∈ [−10, 10]` (41 points) × `σ ∈ [1e-3, 10]`
/// (25 log-spaced points).
pub fn activation_grid() -> Vec<ActivationCheck> {
    let mus: Vec<f64> = (0..41).map(|i| -10.0 + 0.5 * i as f64).collect();
    let sigmas: Vec<f64> = (0..25).map(|i| 10f64.powf(-3.0 + 4.0 * i as f64 / 24.0)).collect();
    let mut out = Vec::new();
    for act in [Activation::Relu, Activation::Elu { alpha: 1.0 }] {
        for &mu in &mus {
            for &sigma in &sigmas {
                let v = sigma * sigma;
                let a = gaussian_act_moments(act, mu, v);
                let (qm, qv) = quadrature_activation_moments(act, mu, v);
                out.push(ActivationCheck {
                    activation: act,
                    mu,
                    sigma,
                    mean: a.mean,
                    var: a.var,
                    quad_mean: qm,
                    quad_var: qv,
                });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MarginalCheck {
    pub case: usize,
    pub analytic: f64,
    pub reference: f64,
    /// Standard error of whichever side is simulated.
    pub se: f64,
}

impl MarginalCheck {
    pub fn z(&self) -> f64 {
        (self.analytic - self.reference).abs() / self.se
    }
}

/// Regression head closed form at output moments `(m, s²)` and target `y`
/// against the kernel-density two-stage simulation at `draws` samples.
pub fn regression_marginal_check(
    case: usize,
    mean: [f64; 2],
    var: [f64; 2],
    y: f64,
    head: &RegressionHeadConfig,
    draws: usize,
    rng: &mut SeededRng,
) -> Result<MarginalCheck> {
    let moments = GaussianActivation::new(
        Tensor::new(vec![1, 2], mean.to_vec())?,
        Tensor::new(vec![1, 2], var.to_vec())?,
    )?;
    let mut tape = Tape::new();
    let g = GaussianVar::constant(&mut tape, &moments);
    let lm = regression_log_marginal(&mut tape, g, &[y], head)?;
    let est = regression_marginal_kde(mean, var, y, head.beta, rng, draws)?;
    Ok(MarginalCheck {
        case,
        analytic: tape.value(lm).data()[0],
        reference: est.log_marginal,
        se: est.se,
    })
}

/// [`regression_marginal_check`] on random moments in the range a trained
/// 1×50 UCI net produces on standardized data: `m₁ ~ N(0, 1)`,
/// `m₂ ~ U(−5, −1)`, `s₁², s₂² ~ U(0.002, 0.02)`, with `y` drawn from the
/// moment-matched predictive.
pub fn regression_marginal_checks(cases: usize, draws: usize, seed: u64) -> Result<Vec<MarginalCheck>> {
    let head = RegressionHeadConfig::default();
    let mut gen = SeededRng::new(seed, 300);
    (0..cases)
        .map(|case| {
            let mean = [gen.standard_normal(), -5.0 + 4.0 * gen.uniform()];
            let var = [0.002 + 0.018 * gen.uniform(), 0.002 + 0.018 * gen.uniform()];
            let spread = (1.0 / head.beta + var[0] + (mean[1] + var[1] / 2.0).exp()).sqrt();
            let y = mean[0] + spread * gen.standard_normal();
            regression_marginal_check(
                case,
                mean,
                var,
                y,
                &head,
                draws,
                &mut SeededRng::new(seed, 400 + case as u64),
            )
        })
        .collect()
}

/// Sampled classification head (`draws` samples) against 64-node
/// Gauss-Hermite quadrature, for 2 and 3 classes.
pub fn classification_marginal_checks(cases: usize, draws: usize, seed: u64) -> Result<Vec<MarginalCheck>> {
    let mut gen = SeededRng::new(seed, 500);
    (0..cases)
        .map(|case| {
            let classes = 2 + case % 2;
            let mean: Vec<f64> = (0..classes).map(|_| gen.normal(0.0, 1.5)).collect();
            let var: Vec<f64> = (0..classes).map(|_| 0.01 + 2.0 * gen.uniform()).collect();
            let label = gen.below(classes as u64) as usize;
            let cfg = ClassificationHeadConfig {
                classes,
                samples: draws,
                ..ClassificationHeadConfig::default()
            };
            let moments = GaussianActivation::new(
                Tensor::new(vec![1, classes], mean.clone())?,
                Tensor::new(vec![1, classes], var.clone())?,
            )?;
            let mut tape = Tape::new();
            let g = GaussianVar::constant(&mut tape, &moments);
            let s = classification_log_marginal(
                &mut tape,
                g,
                &[label],
                &cfg,
                &mut SeededRng::new(seed, 600 + case as u64),
            )?;
            let analytic = tape.value(s.log_marginal).data()[0];
            let logits = tape.value(s.logits);
            let p: Vec<f64> = (0..draws)
                .map(|r| {
                    let row = logits.row(r);
                    (row[label] - crate::special::logsumexp(row)).exp()
                })
                .collect();
            let (pm, pv, ..) = crate::oracle::summarize(&p);
            let reference = classification_marginal_quadrature(&mean, &var, label, cfg.logit_clamp, 64)?;
            Ok(MarginalCheck {
                case,
                analytic,
                reference,
                se: (pv / draws as f64).sqrt() / pm,
            })
        })
        .collect()
}

/// Analytic against central-difference gradient of one parameter entry.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradientCheck {
    /// `|a − n| / max(|a|, |n|, 1e-6)`.
    pub fn rel_err(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-6)
    }
}

/// Compare the tape gradient of `objective` with central differences of step
/// `h` for every entry of every parameter in `net`. `objective` must be a
/// deterministic function of the parameters (reseed any sampling inside it).
pub fn gradient_check(
    net: &mut Network,
    h: f64,
    objective: impl Fn(&Network, &mut Tape) -> Result<crate::autodiff::Var>,
) -> Result<Vec<GradientCheck>> {
    let mut tape = Tape::new();
    let root = objective(net, &mut tape)?;
    let grads = tape.backward(root)?;
    net.store.zero_grad();
    grads.accumulate(&mut net.store)?;
    let eval = |net: &Network| -> Result<f64> {
        let mut tape = Tape::new();
        let root = objective(net, &mut tape)?;
        Ok(tape.value(root).data()[0])
    };
    let ids: Vec<_> = net.store.ids().collect();
    let mut out = Vec::new();
    for id in ids {
        for k in 0..net.store.value(id).len() {
            let x0 = net.store.value(id).data()[k];
            net.store.get_mut(id).value.data_mut()[k] = x0 + h;
            let up = eval(net)?;
            net.store.get_mut(id).value.data_mut()[k] = x0 - h;
            let down = eval(net)?;
            net.store.get_mut(id).value.data_mut()[k] = x0;
            let p = net.store.get(id);
            out.push(GradientCheck {
                param: p.name.clone(),
                index: k,
                analytic: p.grad.data()[k],
                numeric: (up - down) / (2.0 * h),
            });
        }
    }
    Ok(out)
}

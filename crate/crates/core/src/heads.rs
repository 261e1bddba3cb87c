//! Likelihood heads on top of moment-matched outputs, KL terms, and the
//! training objectives assembled from them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::moments::GaussianVar;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Upper bound on the exponent of the latent variance term.
pub const LOG_VAR_CLAMP: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressionHeadConfig {
    /// Observation precision β.
    pub beta: f64,
}

impl Default for RegressionHeadConfig {
    fn default() -> Self {
        Self { beta: 100.0 }
    }
}

impl RegressionHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassificationHeadConfig {
    pub classes: usize,
    /// Monte-Carlo samples of the output layer per datum.
    pub samples: usize,
    /// Logits are clamped to ±this before exponentiation.
    pub logit_clamp: f64,
}

impl Default for ClassificationHeadConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            samples: 5,
            logit_clamp: 30.0,
        }
    }
}

impl ClassificationHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.samples < 1 {
            return Err(Error::Config("need at least 1 sample".into()));
        }
        if !(self.logit_clamp > 0.0) {
            return Err(Error::Config("logit_clamp must be positive".into()));
        }
        Ok(())
    }
}

fn column(tape: &mut Tape, t: Var, col: usize) -> Result<Var> {
    let rows = tape.value(t).dims2()?.0;
    let c = tape.slice_cols(t, col, 1)?;
    tape.reshape(c, &[rows])
}

/// Latent predictive `N(m₁, s₁² + exp(m₂ + s₂²/2))` of the two-unit
/// regression head, as (mean, variance) each of shape `[B]`.
pub fn regression_latent(tape: &mut Tape, out: GaussianVar) -> Result<(Var, Var)> {
    let (_, width) = tape.value(out.mean).dims2()?;
    if width != 2 {
        return Err(Error::shape(
            "regression_head",
            format!("expected 2 output units, got {width}"),
        ));
    }
    let m1 = column(tape, out.mean, 0)?;
    let s1 = column(tape, out.var, 0)?;
    let m2 = column(tape, out.mean, 1)?;
    let s2 = column(tape, out.var, 1)?;
    let half = tape.mul_scalar(s2, 0.5)?;
    let expo = tape.add(m2, half)?;
    let expo = tape.clamp(expo, f64::NEG_INFINITY, LOG_VAR_CLAMP)?;
    let noise = tape.exp(expo)?;
    let var = tape.add(s1, noise)?;
    Ok((m1, var))
}

/// Per-datum `log N(y | m₁, 1/β + s₁² + exp(m₂ + s₂²/2))`, shape `[B]`.
pub fn regression_log_marginal(
    tape: &mut Tape,
    out: GaussianVar,
    y: &[f64],
    cfg: &RegressionHeadConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (mean, latent_var) = regression_latent(tape, out)?;
    if y.len() != tape.value(mean).len() {
        return Err(Error::shape(
            "regression_head",
            format!("{} targets for {} outputs", y.len(), tape.value(mean).len()),
        ));
    }
    let var = tape.add_scalar(latent_var, 1.0 / cfg.beta)?;
    let yv = tape.constant(Tensor::vector(y.to_vec()));
    let diff = tape.sub(yv, mean)?;
    let sq = tape.square(diff)?;
    let quad = tape.div(sq, var)?;
    let logv = tape.log(var)?;
    let sum = tape.add(quad, logv)?;
    let scaled = tape.mul_scalar(sum, -0.5)?;
    tape.add_scalar(scaled, -crate::special::HALF_LN_2PI)
}

/// Output of [`classification_log_marginal`].
#[derive(Clone, Copy, Debug)]
pub struct ClassificationSample {
    /// Per-datum log marginal, shape `[B]`.
    pub log_marginal: Var,
    /// Clamped logit samples, shape `[S·B, C]`, sample-major.
    pub logits: Var,
}

pub(crate) fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::domain(
                "one_hot",
                format!("label {y} out of range for {classes} classes"),
            ));
        }
        t.data_mut()[i * classes + y] = 1.0;
    }
    Ok(t)
}

/// Sampled estimate of `log E_{f~N(m,s²)}[α_y/α₀]` with `α = exp(clamp(f))`.
///
/// Draws `S` reparameterized samples `f = m + s·ε`, so gradients reach both
/// `m` and `s²`. Per-sample terms are `f_y − logsumexp(f)`, combined as
/// `logsumexp_s(·) − log S`.
pub fn classification_log_marginal(
    tape: &mut Tape,
    out: GaussianVar,
    labels: &[usize],
    cfg: &ClassificationHeadConfig,
    rng: &mut SeededRng,
) -> Result<ClassificationSample> {
    cfg.validate()?;
    let (batch, classes) = tape.value(out.mean).dims2()?;
    if classes != cfg.classes {
        return Err(Error::shape(
            "classification_head",
            format!("expected {} classes, got {classes}", cfg.classes),
        ));
    }
    if labels.len() != batch {
        return Err(Error::shape(
            "classification_head",
            format!("{} labels for {batch} outputs", labels.len()),
        ));
    }
    if tape.value(out.var).data().iter().any(|&v| v < 0.0) {
        return Err(Error::domain("classification_head", "negative variance"));
    }
    let s = cfg.samples;
    let targets = one_hot(labels, classes)?;
    let mut eps = Tensor::zeros(&[s * batch, classes]);
    rng.fill_standard_normal(eps.data_mut());

    let m = tape.tile(out.mean, s)?;
    let sd = tape.sqrt(out.var)?;
    let sd = tape.tile(sd, s)?;
    let eps = tape.constant(eps);
    let noise = tape.mul(sd, eps)?;
    let f = tape.add(m, noise)?;
    let f = tape.clamp(f, -cfg.logit_clamp, cfg.logit_clamp)?;

    let y = tape.constant(Tensor::new(vec![s * batch, classes], targets.data().repeat(s))?);
    let picked = tape.mul(f, y)?;
    let fy = tape.sum_axis(picked, 1)?;
    let norm = tape.logsumexp_axis(f, 1)?;
    let lp = tape.sub(fy, norm)?;
    let lp = tape.reshape(lp, &[s, batch])?;
    let lse = tape.logsumexp_axis(lp, 0)?;
    let log_marginal = tape.add_scalar(lse, -(s as f64).ln())?;
    Ok(ClassificationSample {
        log_marginal,
        logits: f,
    })
}

/// `KL(Dir(α) ‖ Dir(1,…,1))` per row of `alpha: [B, C]`.
pub fn kl_dirichlet_uniform(tape: &mut Tape, alpha: Var) -> Result<Var> {
    let (_, c) = tape.value(alpha).dims2()?;
    if tape.value(alpha).data().iter().any(|&a| a <= 0.0) {
        return Err(Error::domain("kl_dirichlet", "alpha must be positive"));
    }
    let a0 = tape.sum_axis(alpha, 1)?;
    let lg_a0 = tape.ln_gamma(a0)?;
    let lg_a = tape.ln_gamma(alpha)?;
    let lg_sum = tape.sum_axis(lg_a, 1)?;
    let dg_a = tape.digamma(alpha)?;
    let dg_a0 = tape.digamma(a0)?;
    let dg_a0 = tape.broadcast_cols(dg_a0, c)?;
    let dg_diff = tape.sub(dg_a, dg_a0)?;
    let am1 = tape.add_scalar(alpha, -1.0)?;
    let cross = tape.mul(am1, dg_diff)?;
    let cross = tape.sum_axis(cross, 1)?;
    let t = tape.sub(lg_a0, lg_sum)?;
    let t = tape.add(t, cross)?;
    tape.add_scalar(t, -crate::special::ln_gamma(c as f64))
}

/// `KL(N(q_mean, q_var) ‖ N(p_mean, p_var))` elementwise. `p_*` are scalars.
pub fn kl_gaussian(tape: &mut Tape, q_mean: Var, q_var: Var, p_mean: f64, p_var: f64) -> Result<Var> {
    if !(p_var > 0.0) {
        return Err(Error::domain("kl_gaussian", "prior variance must be positive"));
    }
    if tape.value(q_var).data().iter().any(|&v| v <= 0.0) {
        return Err(Error::domain("kl_gaussian", "variance must be positive"));
    }
    let d = tape.add_scalar(q_mean, -p_mean)?;
    let d2 = tape.square(d)?;
    let num = tape.add(q_var, d2)?;
    let ratio = tape.mul_scalar(num, 1.0 / p_var)?;
    let logq = tape.log(q_var)?;
    let t = tape.sub(ratio, logq)?;
    let t = tape.add_scalar(t, p_var.ln() - 1.0)?;
    tape.mul_scalar(t, 0.5)
}

/// Per-datum KL of the regression latent predictive against `N(0, 1/α_prior)`.
pub fn regression_kl(tape: &mut Tape, out: GaussianVar, alpha_prior: f64) -> Result<Var> {
    if !(alpha_prior > 0.0) {
        return Err(Error::Config("alpha_prior must be positive".into()));
    }
    let (mean, var) = regression_latent(tape, out)?;
    kl_gaussian(tape, mean, var, 0.0, 1.0 / alpha_prior)
}

/// Per-datum KL for classification: the mean over the drawn logit samples of
/// `KL(Dir(exp f) ‖ Dir(1))`, shape `[B]`.
pub fn classification_kl(tape: &mut Tape, sample: &ClassificationSample, samples: usize) -> Result<Var> {
    let alpha = tape.exp(sample.logits)?;
    let kl = kl_dirichlet_uniform(tape, alpha)?;
    let batch = tape.value(kl).len() / samples;
    let kl = tape.reshape(kl, &[samples, batch])?;
    tape.mean_axis(kl, 0)
}

/// Which likelihood bound enters the PAC regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum PacTask {
    /// `log max B / N ≤ 1`.
    Classification,
    /// `log max B / N ≤ β/(2π)`.
    Regression { beta: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacConfig {
    pub delta: f64,
    pub task: PacTask,
    /// Size of the full training set.
    pub n_data: usize,
}

impl PacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1], got {}", self.delta)));
        }
        if self.n_data < 1 {
            return Err(Error::Config("n_data must be >= 1".into()));
        }
        if let PacTask::Regression { beta } = self.task {
            if !(beta > 0.0) {
                return Err(Error::Config("beta must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn log_bound_per_datum(&self) -> f64 {
        match self.task {
            PacTask::Classification => 1.0,
            PacTask::Regression { beta } => beta / (2.0 * std::f64::consts::PI),
        }
    }
}

/// Scalar objective with its parts, still attached to the tape.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveTerms {
    pub total: Var,
    /// Mean negative log marginal likelihood over the batch.
    pub nll: Var,
    pub regularizer: Option<Var>,
    /// Batch-mean per-datum KL, when a KL term was used.
    pub kl: Option<Var>,
}

/// Values of [`ObjectiveTerms`] read off a tape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub total: f64,
    pub nll: f64,
    pub regularizer: f64,
    pub kl: f64,
}

impl ObjectiveTerms {
    pub fn report(&self, tape: &Tape) -> ObjectiveReport {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0]);
        ObjectiveReport {
            total: tape.value(self.total).data()[0],
            nll: tape.value(self.nll).data()[0],
            regularizer: get(self.regularizer),
            kl: get(self.kl),
        }
    }
}

/// Mean negative log marginal likelihood.
pub fn bedl_objective(tape: &mut Tape, log_marginals: Var) -> Result<ObjectiveTerms> {
    let mean = tape.mean(log_marginals)?;
    let nll = tape.neg(mean)?;
    Ok(ObjectiveTerms {
        total: nll,
        nll,
        regularizer: None,
        kl: None,
    })
}

/// `mean(−log p) + sqrt(KL/N − log δ / N + log max(B)/N)` with
/// `KL = N · mean(per-datum KL)` estimated from the batch.
pub fn pac_objective(tape: &mut Tape, log_marginals: Var, kl: Var, cfg: &PacConfig) -> Result<ObjectiveTerms> {
    cfg.validate()?;
    let base = bedl_objective(tape, log_marginals)?;
    let kl_mean = tape.mean(kl)?;
    let n = cfg.n_data as f64;
    let inner = tape.add_scalar(kl_mean, -cfg.delta.ln() / n + cfg.log_bound_per_datum())?;
    let reg = tape.sqrt(inner)?;
    let total = tape.add(base.nll, reg)?;
    Ok(ObjectiveTerms {
        total,
        nll: base.nll,
        regularizer: Some(reg),
        kl: Some(kl_mean),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperpriorConfig {
    /// Precision of the Gaussian prior on weight means.
    pub alpha0: f64,
    /// Shape and rate of the inverse-gamma prior on weight variances.
    pub a0: f64,
    pub b0: f64,
}

impl Default for HyperpriorConfig {
    fn default() -> Self {
        Self {
            alpha0: 1.0,
            a0: 1.0,
            b0: 1.0,
        }
    }
}

impl HyperpriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.a0 > 0.0 && self.b0 > 0.0) {
            return Err(Error::Config("hyperprior parameters must be positive".into()));
        }
        Ok(())
    }
}

/// `−Σᵢ [log N(μᵢ | 0, 1/α₀) + log InvGam(σᵢ² | a₀, b₀)]` over all (μ, ρ)
/// pairs, with `σ² = exp(ρ)`.
pub fn hyperprior_penalty(tape: &mut Tape, pairs: &[(Var, Var)], cfg: &HyperpriorConfig) -> Result<Var> {
    cfg.validate()?;
    let HyperpriorConfig { alpha0, a0, b0 } = *cfg;
    let gauss_const = -0.5 * (alpha0 / (2.0 * std::f64::consts::PI)).ln();
    let ig_const = crate::special::ln_gamma(a0) - a0 * b0.ln();
    let mut total: Option<Var> = None;
    for &(mean, log_var) in pairs {
        let n = tape.value(mean).len() as f64;
        // ½α₀μ² + const
        let sq = tape.square(mean)?;
        let g = tape.sum(sq)?;
        let g = tape.mul_scalar(g, 0.5 * alpha0)?;
        // (a₀+1)ρ + b₀e^{−ρ} + const
        let rho = tape.sum(log_var)?;
        let rho = tape.mul_scalar(rho, a0 + 1.0)?;
        let neg = tape.neg(log_var)?;
        let inv = tape.exp(neg)?;
        let inv = tape.sum(inv)?;
        let inv = tape.mul_scalar(inv, b0)?;
        let t = tape.add(g, rho)?;
        let t = tape.add(t, inv)?;
        let t = tape.add_scalar(t, n * (gauss_const + ig_const))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, t)?,
            None => t,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(tape.scalar(0.0)),
    }
}

/// Mean NLL plus `penalty / N`.
pub fn hyper_objective(tape: &mut Tape, log_marginals: Var, penalty: Var, n_data: usize) -> Result<ObjectiveTerms> {
    let base = bedl_objective(tape, log_marginals)?;
    let reg = tape.mul_scalar(penalty, 1.0 / n_data.max(1) as f64)?;
    let total = tape.add(base.nll, reg)?;
    Ok(ObjectiveTerms {
        total,
        nll: base.nll,
        regularizer: Some(reg),
        kl: None,
    })
}

/// Per-datum evidential loss for Dirichlet strengths `alpha: [B, C]`:
/// `β/2 · E_Dir[‖y − λ‖²] + KL(Dir(α) ‖ Dir(1))`, where
/// `E‖y − λ‖² = Σ_c (y_c − p_c)² + p_c(1 − p_c)/(α₀ + 1)`.
pub fn edl_loss(tape: &mut Tape, alpha: Var, labels: &[usize], beta_edl: f64) -> Result<Var> {
    let (batch, c) = tape.value(alpha).dims2()?;
    if labels.len() != batch {
        return Err(Error::shape(
            "edl_loss",
            format!("{} labels for {batch} rows", labels.len()),
        ));
    }
    if tape.value(alpha).data().iter().any(|&a| a <= 0.0) {
        return Err(Error::domain("edl_loss", "alpha must be positive"));
    }
    let y = tape.constant(one_hot(labels, c)?);
    let a0 = tape.sum_axis(alpha, 1)?;
    let a0b = tape.broadcast_cols(a0, c)?;
    let p = tape.div(alpha, a0b)?;
    let diff = tape.sub(y, p)?;
    let sq = tape.square(diff)?;
    let one_minus = tape.neg(p)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    let pv = tape.mul(p, one_minus)?;
    let denom = tape.add_scalar(a0b, 1.0)?;
    let pv = tape.div(pv, denom)?;
    let e = tape.add(sq, pv)?;
    let e = tape.sum_axis(e, 1)?;
    let e = tape.mul_scalar(e, 0.5 * beta_edl)?;
    let kl = kl_dirichlet_uniform(tape, alpha)?;
    tape.add(e, kl)
}

/// Dirichlet strengths of a deterministic evidential net: `relu(f) + 1`.
pub fn edl_alpha(tape: &mut Tape, logits: Var) -> Result<Var> {
    let r = tape.relu(logits)?;
    tape.add_scalar(r, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).data()[0]
    }

    #[test]
    fn regression_floor() {
        let mut tape = Tape::new();
        let out = GaussianVar {
            mean: tape.constant(Tensor::from_rows(&[vec![0.7, -60.0]]).unwrap()),
            var: tape.constant(Tensor::zeros(&[1, 2])),
        };
        let lp = regression_log_marginal(&mut tape, out, &[0.7], &RegressionHeadConfig::default()).unwrap();
        let floor = 0.5 * (100.0 / (2.0 * std::f64::consts::PI)).ln();
        assert!((scalar(&tape, lp) - floor).abs() < 1e-12);
    }

    #[test]
    fn kl_dirichlet_two_one() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![2.0, 1.0], vec![1.0, 1.0]]).unwrap());
        let kl = kl_dirichlet_uniform(&mut tape, a).unwrap();
        let v = tape.value(kl).data();
        assert!((v[0] - (2f64.ln() - 0.5)).abs() < 1e-12);
        assert!(v[1].abs() < 1e-15);
    }

    #[test]
    fn kl_gaussian_reference() {
        let mut tape = Tape::new();
        let m = tape.scalar(0.0);
        let v = tape.scalar(1.0);
        let kl = kl_gaussian(&mut tape, m, v, 0.0, std::f64::consts::E).unwrap();
        assert!((scalar(&tape, kl) - 0.5 / std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn pac_bound_constants() {
        for (task, want) in [
            (PacTask::Classification, 1.0),
            (
                PacTask::Regression { beta: 100.0 },
                (100.0 / (2.0 * std::f64::consts::PI)).sqrt(),
            ),
        ] {
            let mut tape = Tape::new();
            let lm = tape.constant(Tensor::vector(vec![-0.3, -0.2]));
            let kl = tape.constant(Tensor::vector(vec![0.0, 0.0]));
            let cfg = PacConfig {
                delta: 1.0,
                task,
                n_data: 10,
            };
            let terms = pac_objective(&mut tape, lm, kl, &cfg).unwrap();
            let r = terms.report(&tape);
            assert!((r.regularizer - want).abs() < 1e-12);
            assert!((r.total - r.nll - r.regularizer).abs() < 1e-15);
        }
        let bad = PacConfig {
            delta: 0.0,
            task: PacTask::Classification,
            n_data: 1,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn hyperprior_reference_value() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::vector(vec![1.0]));
        let lv = tape.constant(Tensor::vector(vec![0.0]));
        let cfg = HyperpriorConfig {
            alpha0: 1.0,
            a0: 2.0,
            b0: 1.0,
        };
        let p = hyperprior_penalty(&mut tape, &[(m, lv)], &cfg).unwrap();
        // −log N(1|0,1) = ½ + ½ log 2π; −log InvGam(1|2,1) = 1
        let want = 0.5 + crate::special::HALF_LN_2PI + 1.0;
        assert!((scalar(&tape, p) - want).abs() < 1e-12);
    }

    #[test]
    fn bad_labels_rejected() {
        assert!(one_hot(&[0, 3], 3).is_err());
    }
}

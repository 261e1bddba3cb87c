//! Predictive uncertainty from output moments, and out-of-domain metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::GaussianActivation;
use crate::rng::SeededRng;

/// Uncertainty summary for one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    /// Mean over samples of `p_c = α_c / α₀`.
    pub mean: Vec<f64>,
    /// Variance over samples of `p_c` (divisor S).
    pub epistemic: Vec<f64>,
    /// Mean over samples of `p_c (1 − p_c)`.
    pub aleatoric: Vec<f64>,
    /// `p̄_c (1 − p̄_c)`, the variance of the one-hot outcome; equals
    /// epistemic + aleatoric.
    pub total: Vec<f64>,
    /// Entropy of `p̄` in nats.
    pub entropy: f64,
}

fn softmax_into(logits: &[f64], clamp: f64, out: &mut [f64]) {
    let max = logits
        .iter()
        .map(|x| x.clamp(-clamp, clamp))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = (x.clamp(-clamp, clamp) - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Entropy in nats, clamped into `[0, log C]`.
pub fn entropy(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    h.clamp(0.0, (p.len() as f64).ln())
}

/// Law-of-total-variance decomposition for each row of `moments` (`[B, C]`),
/// from `samples` draws of the output layer with `α = exp(clamp(f))`.
pub fn decompose(
    moments: &GaussianActivation,
    samples: usize,
    logit_clamp: f64,
    rng: &mut SeededRng,
) -> Result<Vec<UncertaintyReport>> {
    if samples < 2 {
        return Err(Error::Config("decompose needs at least 2 samples".into()));
    }
    let (batch, c) = moments.mean.dims2()?;
    if moments.var.shape() != moments.mean.shape() {
        return Err(Error::ShapeMismatch {
            op: "decompose",
            lhs: moments.mean.shape().to_vec(),
            rhs: moments.var.shape().to_vec(),
        });
    }
    if !moments.mean.all_finite() || moments.var.data().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::domain("decompose", "degenerate moments"));
    }
    let s = samples as f64;
    let mut f = vec![0.0; c];
    let mut p = vec![0.0; c];
    let mut reports = Vec::with_capacity(batch);
    for i in 0..batch {
        let (m, v) = (moments.mean.row(i), moments.var.row(i));
        let sd: Vec<f64> = v.iter().map(|x| x.sqrt()).collect();
        // Welford updates, so identical samples give an epistemic part of exactly 0.
        let mut mean = vec![0.0; c];
        let mut m2 = vec![0.0; c];
        let mut alea = vec![0.0; c];
        for n in 1..=samples {
            for k in 0..c {
                f[k] = m[k] + sd[k] * rng.standard_normal();
            }
            softmax_into(&f, logit_clamp, &mut p);
            let w = 1.0 / n as f64;
            for k in 0..c {
                let d = p[k] - mean[k];
                mean[k] += d * w;
                m2[k] += d * (p[k] - mean[k]);
                alea[k] += (p[k] * (1.0 - p[k]) - alea[k]) * w;
            }
        }
        let epistemic: Vec<f64> = m2.iter().map(|x| (x / s).max(0.0)).collect();
        let aleatoric = alea;
        let total = mean.iter().map(|x| x * (1.0 - x)).collect();
        reports.push(UncertaintyReport {
            entropy: entropy(&mean),
            mean,
            epistemic,
            aleatoric,
            total,
        });
    }
    Ok(reports)
}

/// Area under the empirical CDF of `entropies` over `[0, log C]`.
///
/// The ECDF is right-continuous and piecewise constant, so the integral is a
/// sum of rectangles between consecutive sorted values. It equals
/// `log C − mean(entropy)`; 0 means every input got the uniform prediction.
pub fn ecdf_auc(entropies: &[f64], classes: usize) -> Result<f64> {
    if entropies.is_empty() {
        return Err(Error::domain("ecdf_auc", "no entropies"));
    }
    if classes < 2 {
        return Err(Error::domain("ecdf_auc", "need at least 2 classes"));
    }
    let upper = (classes as f64).ln();
    let tol = 1e-9;
    let mut sorted = Vec::with_capacity(entropies.len());
    for &e in entropies {
        if !(e >= -tol && e <= upper + tol) {
            return Err(Error::domain("ecdf_auc", format!("entropy {e} outside [0, {upper}]")));
        }
        sorted.push(e.clamp(0.0, upper));
    }
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut area = 0.0;
    for (i, &e) in sorted.iter().enumerate() {
        let next = sorted.get(i + 1).copied().unwrap_or(upper);
        area += (i + 1) as f64 / n * (next - e);
    }
    Ok(area)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Percentage of rows whose argmax differs from the label.
pub fn test_error(predictions: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            "test_error",
            format!("{} predictions for {} labels", predictions.len(), labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::shape("test_error", "empty input"));
    }
    let wrong = predictions.iter().zip(labels).filter(|(p, &y)| argmax(p) != y).count();
    Ok(100.0 * wrong as f64 / labels.len() as f64)
}

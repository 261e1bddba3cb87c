//! Scalar special functions.
//!
//! The error function comes from `libm` (the FreeBSD/musl rational
//! approximations, < 1 ulp on the real line), which gives Φ with absolute
//! error far below 1e-12 everywhere. `lgamma` is also taken from `libm`.
//! Digamma and trigamma use upward recurrence to x ≥ 10 followed by their
//! asymptotic series; truncation error there is below 1e-14.

use std::f64::consts::{PI, SQRT_2};

/// 1/√(2π)
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
/// ½·ln(2π)
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// ln Φ(x), accurate in both tails.
pub fn log_normal_cdf(x: f64) -> f64 {
    if x > 0.0 {
        // Φ(x) = 1 - Φ(-x); ln_1p keeps precision as Φ(-x) → 0.
        (-normal_cdf(-x)).ln_1p()
    } else if x > -37.0 {
        normal_cdf(x).ln()
    } else {
        // Mills-ratio asymptotic series.
        let z2 = 1.0 / (x * x);
        let series = 1.0 - z2 + 3.0 * z2 * z2 - 15.0 * z2 * z2 * z2 + 105.0 * z2.powi(4);
        -0.5 * x * x - (-x).ln() - HALF_LN_2PI + series.ln()
    }
}

#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// ψ(x) for x > 0.
pub fn digamma(mut x: f64) -> f64 {
    if x.is_nan() || x <= 0.0 {
        return f64::NAN;
    }
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let z = 1.0 / (x * x);
    let tail = z
        * (1.0 / 12.0
            - z * (1.0 / 120.0 - z * (1.0 / 252.0 - z * (1.0 / 240.0 - z * (1.0 / 132.0 - z * 691.0 / 32760.0)))));
    acc + x.ln() - 0.5 / x - tail
}

/// ψ'(x) for x > 0.
pub fn trigamma(mut x: f64) -> f64 {
    if x.is_nan() || x <= 0.0 {
        return f64::NAN;
    }
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let z = 1.0 / (x * x);
    let tail = 1.0 / x
        + z / 2.0
        + z / x * (1.0 / 6.0 - z * (1.0 / 30.0 - z * (1.0 / 42.0 - z * (1.0 / 30.0 - z * 5.0 / 66.0))));
    acc + tail
}

/// Numerically stable ln Σ exp(xᵢ). Returns -∞ for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// ln N(x | mean, var)
#[inline]
pub fn normal_log_density(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * PI * var).ln() - 0.5 * d * d / var
}

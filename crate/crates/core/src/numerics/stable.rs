//! Overflow-safe scalar kernels shared by the tape and the discriminator.

use crate::error::{Error, Result};

/// Softmax with max-subtraction.
pub fn stable_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}

/// `log Σ exp(v)` evaluated around the maximum.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("log_sum_exp"));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let total: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + total.ln())
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// Exact derivative of [`gelu`].
#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Shannon entropy in nats with `0 · log 0 = 0`.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    let mut h = 0.0;
    for &p in probs {
        if p < 0.0 {
            return Err(Error::NegativeProbability(p));
        }
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h)
}

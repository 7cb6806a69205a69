//! Closed-form helpers on plain slices, outside of any graph.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{KernelError, Result};
use crate::graph::PROB_EPS;

/// `KL(N(mu, diag sigma²) || N(0, I)) = ½ Σ (mu² + sigma² − ln sigma² − 1)`.
pub fn gaussian_kl(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(KernelError::Shape(format!(
            "mu has {} entries, sigma {}",
            mu.len(),
            sigma.len()
        )));
    }
    if let Some(s) = sigma.iter().find(|&&s| !s.is_finite() || s <= 0.0) {
        return Err(KernelError::Domain(format!(
            "sigma must be positive, got {s}"
        )));
    }
    Ok(0.5
        * mu.iter()
            .zip(sigma)
            .map(|(m, s)| {
                let v = s * s;
                m * m + v - v.ln() - 1.0
            })
            .sum::<f64>())
}

/// `z = mu + sigma ⊙ eps`.
pub fn reparameterize(mu: &[f64], sigma: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != sigma.len() || mu.len() != eps.len() {
        return Err(KernelError::Shape(format!(
            "reparameterize lengths {} / {} / {}",
            mu.len(),
            sigma.len(),
            eps.len()
        )));
    }
    Ok(mu
        .iter()
        .zip(sigma)
        .zip(eps)
        .map(|((m, s), e)| m + s * e)
        .collect())
}

pub fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Binary cross-entropy with the probability clamped away from 0 and 1.
pub fn bce(prob: f64, y: f64) -> f64 {
    let p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Softmax cross-entropy of `logits` against class index `class`.
pub fn cross_entropy(logits: &[f64], class: usize) -> Result<f64> {
    if class >= logits.len() {
        return Err(KernelError::Shape(format!(
            "class {class} of {} logits",
            logits.len()
        )));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[class])
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

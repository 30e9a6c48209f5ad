//! Focal loss `-alpha[t] * (1 - p_t)^gamma * ln(p_t)` and its logit gradient.

use crate::error::{Error, Result};

/// Lower clamp applied to the target probability.
pub const PROB_FLOOR: f64 = 1e-12;
const SUM_TOLERANCE: f64 = 1e-9;

fn check(probs: &[f64], target: usize, alpha: &[f64]) -> Result<()> {
    if target >= probs.len() {
        return Err(Error::Domain(format!(
            "target class {target} out of range for {} classes",
            probs.len()
        )));
    }
    if alpha.len() != probs.len() {
        return Err(Error::Domain(format!(
            "alpha has {} entries for {} classes",
            alpha.len(),
            probs.len()
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::Domain(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(())
}

/// Focal loss of a predictive distribution against `target`.
///
/// With `gamma = 0` and unit `alpha` this is exactly the cross-entropy
/// `-ln(p_t)`.
pub fn focal_loss(probs: &[f64], target: usize, gamma: f64, alpha: &[f64]) -> Result<f64> {
    check(probs, target, alpha)?;
    Ok(focal_term(probs[target], gamma, alpha[target]))
}

#[inline]
pub(crate) fn focal_term(p_t: f64, gamma: f64, alpha_t: f64) -> f64 {
    let p = p_t.clamp(PROB_FLOOR, 1.0);
    let modulator = if gamma == 0.0 { 1.0 } else { (1.0 - p).powf(gamma) };
    // -0 for a perfect prediction
    (-alpha_t * modulator * p.ln()).max(0.0)
}

/// Gradient of the focal loss with respect to the logits that produced
/// `probs` through a softmax.
///
/// With `g = alpha * (gamma (1-p_t)^(gamma-1) p_t ln p_t - (1-p_t)^gamma)`,
/// `dL/dz_j = g * (1[j = t] - p_j)`.
pub fn focal_grad_logits(probs: &[f64], target: usize, gamma: f64, alpha: &[f64]) -> Result<Vec<f64>> {
    check(probs, target, alpha)?;
    let mut grad = vec![0.0; probs.len()];
    focal_grad_into(probs, target, gamma, alpha[target], &mut grad);
    Ok(grad)
}

#[inline]
pub(crate) fn focal_grad_into(probs: &[f64], target: usize, gamma: f64, alpha_t: f64, out: &mut [f64]) {
    let p = probs[target].clamp(PROB_FLOOR, 1.0);
    let q = 1.0 - p;
    let first = if gamma == 0.0 || q == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * p * p.ln()
    };
    let second = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    let g = alpha_t * (first - second);
    for (j, o) in out.iter_mut().enumerate() {
        let indicator = if j == target { 1.0 } else { 0.0 };
        *o = g * (indicator - probs[j]);
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

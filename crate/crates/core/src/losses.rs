//! Classification objectives: cross-entropy, the confidence-gated
//! repulsion loss against the hardest negative class, and their weighted
//! sum.
//!
//! The repulsion loss for logits `z` and target `x` is
//! `softplus((1 + a) * z_y - z_x)` where `z_y` is the largest non-target
//! logit and `a = 1 - softmax(z)[x]`. The gate `a` is a stop-gradient
//! quantity: gradients reach `z_x` and `z_y` only.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};

/// Overflow-safe `ln(1 + e^t)`.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Logistic function, stable for large `|t|`.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

fn check_logits(logits: &[f64], target: usize) -> Result<()> {
    if logits.len() < 2 {
        return contract_err(format!("need at least 2 classes, got {}", logits.len()));
    }
    if target >= logits.len() {
        return contract_err(format!(
            "target {target} out of range for {} classes",
            logits.len()
        ));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "loss input" });
    }
    Ok(())
}

/// `-log softmax(logits)[target]` via log-sum-exp.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    check_logits(logits, target)?;
    Ok(log_sum_exp(logits) - logits[target])
}

/// Per-sample record of the quantities behind one repulsion-loss value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DareDiagnostics {
    pub z_x: f64,
    pub z_y: f64,
    pub y_index: usize,
    pub p_x: f64,
    pub alpha: f64,
    pub z_y_prime: f64,
    pub loss: f64,
}

/// Index and value of the largest non-target logit; ties go to the lowest
/// index.
pub fn hardest_negative(logits: &[f64], target: usize) -> (usize, f64) {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in logits.iter().enumerate() {
        if i == target {
            continue;
        }
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best.expect("at least two classes")
}

pub fn dare_loss(logits: &[f64], target: usize) -> Result<(f64, DareDiagnostics)> {
    dare_loss_gated(logits, target, None)
}

/// Repulsion loss with the confidence gate optionally pinned to `alpha`
/// (finite-difference checks freeze it at the base point).
pub fn dare_loss_gated(
    logits: &[f64],
    target: usize,
    alpha: Option<f64>,
) -> Result<(f64, DareDiagnostics)> {
    check_logits(logits, target)?;
    let p_x = (logits[target] - log_sum_exp(logits)).exp();
    let alpha = alpha.unwrap_or(1.0 - p_x);
    let (y_index, z_y) = hardest_negative(logits, target);
    let z_x = logits[target];
    let z_y_prime = alpha * z_y + z_y;
    let loss = softplus(z_y_prime - z_x);
    Ok((
        loss,
        DareDiagnostics {
            z_x,
            z_y,
            y_index,
            p_x,
            alpha,
            z_y_prime,
            loss,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return contract_err("lambda1 must be a finite value >= 0");
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return contract_err("lambda2 must be a finite value >= 0");
        }
        Ok(())
    }
}

pub fn combined_loss(logits: &[f64], target: usize, w: LossWeights) -> Result<f64> {
    let ce = cross_entropy(logits, target)?;
    let (dare, _) = dare_loss(logits, target)?;
    Ok(w.lambda1 * ce + w.lambda2 * dare)
}

/// Arithmetic mean of [`combined_loss`] over a batch.
pub fn combined_batch_loss(batch: &[(Vec<f64>, usize)], w: LossWeights) -> Result<f64> {
    if batch.is_empty() {
        return contract_err("empty batch");
    }
    let mut total = 0.0;
    for (logits, target) in batch {
        total += combined_loss(logits, *target, w)?;
    }
    Ok(total / batch.len() as f64)
}

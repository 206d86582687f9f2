//! Classification metrics and the repulsion-loss summary attached to them.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::losses::{self, LossWeights};

/// Aggregate of per-sample repulsion diagnostics over one evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DareSummary {
    pub samples: usize,
    pub mean_alpha: f64,
    pub mean_p_x: f64,
    pub mean_loss: f64,
    /// Mean of `z'_y - z_x`.
    pub mean_margin: f64,
    /// Fraction of samples whose hardest negative is also the predicted class.
    pub hardest_is_prediction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub mean_loss: f64,
    pub dare: DareSummary,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Metrics {
    /// Tallies `(logits, label)` pairs. `mean_loss` uses `weights`.
    pub fn from_logits(num_classes: usize, outputs: &[(Vec<f64>, usize)], weights: LossWeights) -> Result<Self> {
        if outputs.is_empty() {
            return contract_err("cannot evaluate an empty set");
        }
        let mut confusion = vec![vec![0u64; num_classes]; num_classes];
        let mut loss = 0.0;
        let mut dare = DareSummary::default();
        for (logits, label) in outputs {
            if logits.len() != num_classes {
                return contract_err(format!("expected {num_classes} logits, got {}", logits.len()));
            }
            let pred = argmax(logits);
            confusion[*label][pred] += 1;
            let ce = losses::cross_entropy(logits, *label)?;
            let (d, diag) = losses::dare_loss(logits, *label)?;
            loss += weights.lambda1 * ce + weights.lambda2 * d;
            dare.mean_alpha += diag.alpha;
            dare.mean_p_x += diag.p_x;
            dare.mean_loss += diag.loss;
            dare.mean_margin += diag.z_y_prime - diag.z_x;
            if diag.y_index == pred {
                dare.hardest_is_prediction += 1.0;
            }
        }
        let n = outputs.len() as f64;
        dare.samples = outputs.len();
        dare.mean_alpha /= n;
        dare.mean_p_x /= n;
        dare.mean_loss /= n;
        dare.mean_margin /= n;
        dare.hardest_is_prediction /= n;
        Ok(Self::from_confusion(confusion, loss / n, dare))
    }

    pub fn from_confusion(confusion: Vec<Vec<u64>>, mean_loss: f64, dare: DareSummary) -> Self {
        let total: u64 = confusion.iter().flatten().sum();
        let trace: u64 = (0..confusion.len()).map(|i| confusion[i][i]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: u64 = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[i] as f64 / n as f64
                }
            })
            .collect();
        Self {
            overall_accuracy: if total == 0 { 0.0 } else { trace as f64 / total as f64 },
            per_class_accuracy,
            confusion,
            mean_loss,
            dare,
        }
    }

    pub fn num_samples(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn class_counts(&self) -> Vec<u64> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }
}

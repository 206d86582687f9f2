//! Loss comparison on a plain convolutional classifier (image stem and a
//! linear head over the flattened feature map) so that the objective is the
//! only variable.
//!
//! The head sees positions on purpose: after global pooling, a smiling and
//! a frowning mouth band produce the same bag of local edge patches, so a
//! pooled stem cannot separate the classes at all.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::LossWeights;
use crate::model::{stem_forward_on, ModelInput, StemParams};
use crate::params::{Affine, Bound, ParamStore};
use crate::rng::{derive_seed, Rng};
use crate::synth::{self, DatasetProfile, Split, HEATMAP_SIGMA};
use crate::tape::{Tape, Var};
use crate::trainer::{Classifier, Network, TrainConfig, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Dare,
    Combined,
}

impl LossKind {
    pub fn weights(self) -> LossWeights {
        match self {
            LossKind::Ce => LossWeights { lambda1: 1.0, lambda2: 0.0 },
            LossKind::Dare => LossWeights { lambda1: 0.0, lambda2: 1.0 },
            LossKind::Combined => LossWeights::default(),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "dare" => Ok(LossKind::Dare),
            "combined" => Ok(LossKind::Combined),
            _ => Err(format!("unknown loss `{s}` (ce, dare, combined)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StemClassifier {
    pub params: ParamStore,
    pub stem: StemParams,
    pub head: Affine,
    pub num_classes: usize,
}

impl StemClassifier {
    /// `grid` is the token lattice side of the inputs.
    pub fn new(grid: usize, stem_channels: usize, channels: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = Rng::from_seed(seed);
        let mut params = ParamStore::new();
        let stem = StemParams {
            conv1: Affine::conv(&mut params, "stem.conv1", 3, stem_channels, 3, 0.0, &mut rng),
            conv2: Affine::conv(&mut params, "stem.conv2", stem_channels, channels, 3, 0.0, &mut rng),
        };
        let head = Affine::linear(&mut params, "head", channels * grid * grid, num_classes, &mut rng);
        Self {
            params,
            stem,
            head,
            num_classes,
        }
    }
}

impl Network for StemClassifier {
    fn store(&self) -> &ParamStore {
        &self.params
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn classes(&self) -> usize {
        self.num_classes
    }

    fn heatmap_sigma(&self) -> f64 {
        HEATMAP_SIGMA
    }

    fn logits_on(&self, tape: &mut Tape, bound: &Bound, input: &ModelInput) -> Result<Var> {
        let image = tape.constant(input.image.tensor().clone());
        let x = stem_forward_on(tape, bound, &self.stem, image)?;
        let n = tape.value(x).numel();
        let f = tape.reshape(x, &[n])?;
        let z = self.head.apply_linear(tape, bound, f)?;
        tape.reshape(z, &[self.num_classes])
    }
}

impl Classifier for StemClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let z = self.logits_on(&mut tape, &b, input)?;
        Ok(tape.data(z).to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub per_class: usize,
    pub val_per_class: usize,
    pub grid: usize,
    pub stem_channels: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 20,
            learning_rate: 1e-3,
            per_class: 60,
            val_per_class: 40,
            grid: 16,
            stem_channels: 8,
            channels: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub loss: LossKind,
    pub accuracies: Vec<f64>,
    pub median_accuracy: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains one classifier per seed with `loss` on the confusable-pair
/// profile and reports final clean validation accuracy. Seed `i` fixes
/// the dataset, the initialization and the batch order, so different
/// losses see identical runs apart from the objective.
pub fn bench_loss(loss: LossKind, seeds: usize, cfg: &BenchConfig) -> Result<BenchResult> {
    let mut accuracies = Vec::with_capacity(seeds);
    for i in 0..seeds as u64 {
        let run_seed = derive_seed(cfg.seed, i);
        let profile = DatasetProfile::confusable_pair(cfg.per_class, cfg.val_per_class, cfg.grid, run_seed);
        let train = synth::build_split(&profile, Split::Train, None)?;
        let val = synth::build_split(&profile, Split::Val, None)?;
        let net = StemClassifier::new(cfg.grid, cfg.stem_channels, cfg.channels, profile.num_classes(), derive_seed(run_seed, 1));
        let tc = TrainConfig {
            learning_rate: cfg.learning_rate,
            batch_size: cfg.batch_size,
            steps: cfg.steps,
            loss_weights: loss.weights(),
            seed: run_seed,
            val_every: cfg.steps.max(1),
            occlusion_augment: Vec::new(),
            ..TrainConfig::default()
        };
        let (_, _, report) = Trainer::new(net, tc, train, val)?.run()?;
        let acc = report.final_metrics().map_or(0.0, |m| m.overall_accuracy);
        accuracies.push(acc);
    }
    Ok(BenchResult {
        loss,
        median_accuracy: median(&accuracies),
        accuracies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn loss_weights_per_kind() {
        assert_eq!(LossKind::Ce.weights().lambda2, 0.0);
        assert_eq!(LossKind::Combined.weights(), LossWeights::default());
        assert_eq!("dare".parse::<LossKind>().unwrap(), LossKind::Dare);
    }
}

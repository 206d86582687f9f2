//! Adam, seeded mini-batch training, evaluation and occlusion sweeps.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::losses::LossWeights;
use crate::metrics::Metrics;
use crate::model::{Ablation, Model, ModelInput};
use crate::params::{Bound, ParamStore};
use crate::rng::{derive_seed, Rng};
use crate::synth::{self, DatasetProfile, SceneSample, Split};
use crate::tape::{Tape, Var};

const BATCH_TAG: u64 = 0xba7c_0000;
const EPOCH_TAG: u64 = 0xe90c_0000;
const INIT_TAG: u64 = 0x1417;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub ablation: Ablation,
    /// Validation cadence in steps; the final step is always evaluated.
    pub val_every: usize,
    /// Occlusion ratios drawn uniformly per training sample.
    pub occlusion_augment: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 20,
            steps: 2000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            loss_weights: LossWeights::default(),
            seed: 0,
            ablation: Ablation::default(),
            val_every: 100,
            occlusion_augment: vec![0.0, 0.1, 0.2, 0.3],
        }
    }
}

fn config_err<T>(path: &str, msg: impl Into<String>) -> Result<T> {
    Err(Error::Config {
        path: path.into(),
        msg: msg.into(),
    })
}

impl TrainConfig {
    /// Checks the invariants a config file must satisfy; `prefix` is the
    /// key path of this block.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let at = |k: &str| format!("{prefix}.{k}");
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return config_err(&at("learning_rate"), "must be a finite value > 0");
        }
        if self.batch_size == 0 {
            return config_err(&at("batch_size"), "must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return config_err(&at("beta1"), "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return config_err(&at("beta2"), "must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return config_err(&at("epsilon"), "must be > 0");
        }
        if self.val_every == 0 {
            return config_err(&at("val_every"), "must be >= 1");
        }
        if let Err(e) = self.loss_weights.validate() {
            return config_err(&at("loss_weights"), e.to_string());
        }
        if let Some(r) = self.occlusion_augment.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return config_err(&at("occlusion_augment"), format!("ratio {r} outside [0, 1)"));
        }
        Ok(())
    }

    /// Loss weights after the `no_dare` ablation.
    pub fn effective_weights(&self) -> LossWeights {
        if self.ablation.no_dare {
            LossWeights {
                lambda2: 0.0,
                ..self.loss_weights
            }
        } else {
            self.loss_weights
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, INIT_TAG)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update of `theta` in place; `t` is the step count after
/// incrementing (first step is 1).
pub fn adam_update(theta: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// Applies accumulated gradients to every unfrozen parameter.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != store.len() || state.v.len() != store.len() {
        return contract_err(format!(
            "optimizer state has {} slots, store has {} parameters",
            state.m.len(),
            store.len()
        ));
    }
    state.t += 1;
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let n = store.get(id).numel();
        if state.m[k].len() != n || state.v[k].len() != n {
            return contract_err(format!("optimizer state shape mismatch for `{}`", store.name(id)));
        }
        if store.is_frozen(id) {
            continue;
        }
        let g = store.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let theta = store.get_mut(id).data_mut();
        adam_update(theta, &g, &mut state.m[k], &mut state.v[k], state.t, cfg);
    }
    Ok(())
}

/// Anything that maps network inputs to class logits.
pub trait Classifier {
    fn num_classes(&self) -> usize;
    fn logits(&self, input: &ModelInput) -> Result<Vec<f64>>;
}

/// A trainable classifier over a [`ParamStore`].
pub trait Network {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn classes(&self) -> usize;
    fn heatmap_sigma(&self) -> f64;
    fn logits_on(&self, tape: &mut Tape, bound: &Bound, input: &ModelInput) -> Result<Var>;
}

impl Network for Model {
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
        self.config.heatmap_sigma
    }

    fn logits_on(&self, tape: &mut Tape, bound: &Bound, input: &ModelInput) -> Result<Var> {
        Ok(self.forward_on(tape, bound, input)?.logits)
    }
}

impl Classifier for Model {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, input: &ModelInput) -> Result<Vec<f64>> {
        Model::logits(self, input)
    }
}

/// A scene prepared for the network.
#[derive(Clone, Debug)]
pub struct Example {
    pub input: ModelInput,
    pub label: usize,
}

pub fn prepare(samples: &[SceneSample], sigma: f64) -> Result<Vec<Example>> {
    samples
        .iter()
        .map(|s| {
            Ok(Example {
                input: ModelInput::from_scene(s, sigma)?,
                label: s.label,
            })
        })
        .collect()
}

pub fn evaluate(net: &impl Classifier, examples: &[Example], weights: LossWeights) -> Result<Metrics> {
    let outputs = examples
        .iter()
        .map(|e| Ok((net.logits(&e.input)?, e.label)))
        .collect::<Result<Vec<_>>>()?;
    Metrics::from_logits(net.num_classes(), &outputs, weights)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub metrics: Metrics,
}

/// Regenerates the validation split at each ratio (same sample seeds) and
/// evaluates. Rows follow the order of `ratios`.
pub fn occlusion_sweep(
    net: &impl Classifier,
    profile: &DatasetProfile,
    ratios: &[f64],
    sigma: f64,
    weights: LossWeights,
) -> Result<Vec<SweepRow>> {
    ratios
        .iter()
        .map(|&ratio| {
            let occ = (ratio != 0.0).then_some(ratio);
            let split = synth::build_split(profile, Split::Val, occ)?;
            let metrics = evaluate(net, &prepare(&split, sigma)?, weights)?;
            Ok(SweepRow { ratio, metrics })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub step: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss of every step, in order.
    pub step_losses: Vec<f64>,
    pub validations: Vec<Validation>,
}

impl TrainReport {
    pub fn final_metrics(&self) -> Option<&Metrics> {
        self.validations.last().map(|v| &v.metrics)
    }
}

/// Step-wise training driver. [`Trainer::run`] executes the configured
/// schedule; callers that need to inspect intermediate states can drive
/// [`Trainer::step`] and [`Trainer::validate`] directly.
pub struct Trainer<N: Network> {
    pub net: N,
    pub cfg: TrainConfig,
    pub adam: AdamState,
    train: Vec<SceneSample>,
    val: Vec<Example>,
    step: usize,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl<N: Network> Trainer<N> {
    pub fn new(net: N, cfg: TrainConfig, train: Vec<SceneSample>, val: Vec<SceneSample>) -> Result<Self> {
        if train.is_empty() {
            return contract_err("training set is empty");
        }
        // lr = 0 is allowed here (frozen-optimizer runs); config files
        // require lr > 0.
        if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
            return contract_err("learning rate must be finite and >= 0");
        }
        if cfg.batch_size == 0 || cfg.val_every == 0 {
            return contract_err("batch_size and val_every must be >= 1");
        }
        cfg.loss_weights.validate()?;
        if let Some(s) = train.iter().chain(&val).find(|s| s.label >= net.classes()) {
            return contract_err(format!("label {} outside the {} model classes", s.label, net.classes()));
        }
        let val = prepare(&val, net.heatmap_sigma())?;
        let adam = AdamState::new(net.store());
        let mut t = Self {
            net,
            cfg,
            adam,
            train,
            val,
            step: 0,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        t.reshuffle();
        Ok(t)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.train.len()).collect();
        Rng::stream(self.cfg.seed, EPOCH_TAG + self.epoch).shuffle(&mut self.order);
        self.cursor = 0;
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn batch_seed(&self, step: usize) -> u64 {
        derive_seed(self.cfg.seed ^ BATCH_TAG, step as u64)
    }

    fn next_indices(&mut self) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.cfg.batch_size);
        while idx.len() < self.cfg.batch_size {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            idx.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        idx
    }

    /// Training example with its per-step occlusion draw.
    fn augmented(&self, index: usize, seed: u64) -> Result<Example> {
        let s = &self.train[index];
        let ratios = &self.cfg.occlusion_augment;
        let s = if ratios.is_empty() {
            s.clone()
        } else {
            let mut rng = Rng::from_seed(seed);
            let r = ratios[rng.below(ratios.len())];
            synth::apply_occlusion(s, r, rng.next_u64())?
        };
        Ok(Example {
            input: ModelInput::from_scene(&s, self.net.heatmap_sigma())?,
            label: s.label,
        })
    }

    /// One optimizer step; returns the mean batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.step;
        let batch_seed = self.batch_seed(step);
        let diverged = |detail: String| Error::Diverged {
            step,
            batch_seed,
            detail,
        };
        let weights = self.cfg.effective_weights();
        let indices = self.next_indices();
        self.net.store_mut().zero_grad();
        let mut total = 0.0;
        for (j, &i) in indices.iter().enumerate() {
            let ex = self.augmented(i, derive_seed(batch_seed, j as u64))?;
            let mut tape = Tape::new();
            let bound = self.net.store().bind(&mut tape);
            let forward = self
                .net
                .logits_on(&mut tape, &bound, &ex.input)
                .and_then(|logits| weighted_loss(&mut tape, logits, ex.label, weights));
            let loss = match forward {
                Ok(l) => l,
                Err(Error::NonFinite { op }) => {
                    return Err(diverged(format!("non-finite {op} output on sample {i}")))
                }
                Err(e) => return Err(e),
            };
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(diverged(format!("loss {value} on sample {i}")));
            }
            total += value;
            let grads = tape.backward(loss)?;
            self.net.store_mut().accumulate(&grads, &bound);
        }
        let n = indices.len() as f64;
        self.net.store_mut().scale_grads(1.0 / n);
        if self.net.store().flatten_grads().iter().any(|g| !g.is_finite()) {
            return Err(diverged("non-finite gradient".into()));
        }
        adam_step(self.net.store_mut(), &mut self.adam, &self.cfg.adam())?;
        self.step += 1;
        Ok(total / n)
    }

    pub fn validate(&self) -> Result<Metrics> {
        let outputs = self
            .val
            .iter()
            .map(|e| {
                let mut tape = Tape::new();
                let bound = self.net.store().bind(&mut tape);
                let logits = self.net.logits_on(&mut tape, &bound, &e.input)?;
                Ok((tape.data(logits).to_vec(), e.label))
            })
            .collect::<Result<Vec<_>>>()?;
        Metrics::from_logits(self.net.classes(), &outputs, self.cfg.effective_weights())
    }

    /// Runs the remaining schedule, validating every `val_every` steps and
    /// after the last one.
    pub fn run(mut self) -> Result<(N, AdamState, TrainReport)> {
        let mut report = TrainReport {
            step_losses: Vec::with_capacity(self.cfg.steps),
            validations: Vec::new(),
        };
        while self.step < self.cfg.steps {
            report.step_losses.push(self.step()?);
            let done = self.step == self.cfg.steps;
            if !self.val.is_empty() && (self.step.is_multiple_of(self.cfg.val_every) || done) {
                report.validations.push(Validation {
                    step: self.step,
                    metrics: self.validate()?,
                });
            }
        }
        Ok((self.net, self.adam, report))
    }
}

/// `lambda1 * CE + lambda2 * DARE` on the tape, with the confidence gate
/// computed from the current logits.
pub fn weighted_loss(tape: &mut Tape, logits: Var, target: usize, w: LossWeights) -> Result<Var> {
    let ce = tape.cross_entropy(logits, target)?;
    let ce = tape.scale(ce, w.lambda1)?;
    if w.lambda2 == 0.0 {
        return Ok(ce);
    }
    let (dare, _) = tape.dare_loss(logits, target, None)?;
    let dare = tape.scale(dare, w.lambda2)?;
    tape.add(ce, dare)
}

/// Builds the model for `cfg`, generates both splits of `profile` and
/// runs the schedule.
pub fn train(
    model_cfg: &crate::model::ModelConfig,
    cfg: &TrainConfig,
    profile: &DatasetProfile,
) -> Result<(Model, AdamState, TrainReport)> {
    let model = Model::new(model_cfg.clone(), cfg.ablation, profile.num_classes(), cfg.init_seed())?;
    let train = synth::build_split(profile, Split::Train, None)?;
    let val = synth::build_split(profile, Split::Val, None)?;
    Trainer::new(model, cfg.clone(), train, val)?.run()
}

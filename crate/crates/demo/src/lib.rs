//! wasm-bindgen surface for `www/index.html`.
//!
//! Three operations: render a synthetic face (optionally occluded), break
//! a logit vector down into its loss terms, and train a tiny model on a
//! two-class profile a few steps at a time.

use wasm_bindgen::prelude::*;

use ferfuse::losses::{cross_entropy, dare_loss, softmax, LossWeights};
use ferfuse::model::{Ablation, Model, ModelConfig};
use ferfuse::synth::{self, DatasetProfile, SceneSample, Split, NUM_REGIONS};
use ferfuse::trainer::{TrainConfig, Trainer};

pub const CLASS_NAMES: [&str; 8] = ["anger", "disgust", "fear", "happiness", "neutral", "sadness", "surprise", "contempt"];

const SEG_COLORS: [[u8; 3]; NUM_REGIONS] = [
    [40, 40, 40],
    [230, 200, 160],
    [70, 110, 200],
    [90, 170, 90],
    [200, 140, 60],
    [200, 50, 70],
];

fn js_err(e: ferfuse::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Scene {
    inner: SceneSample,
}

#[wasm_bindgen]
impl Scene {
    /// Image side in pixels.
    pub fn size(&self) -> usize {
        self.inner.image.height()
    }

    /// Token lattice side.
    pub fn grid(&self) -> usize {
        self.inner.seg.height()
    }

    pub fn label(&self) -> usize {
        self.inner.label
    }

    pub fn occlusion_ratio(&self) -> f64 {
        self.inner.occlusion_ratio
    }

    /// Row-major RGBA bytes for an `ImageData`.
    pub fn rgba(&self) -> Vec<u8> {
        let img = &self.inner.image;
        let n = img.height() * img.width();
        let d = img.data();
        let mut out = Vec::with_capacity(4 * n);
        for p in 0..n {
            for c in 0..3 {
                out.push((d[c * n + p].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
        out
    }

    /// RGBA of the region map, one pixel per token.
    pub fn seg_rgba(&self) -> Vec<u8> {
        let seg = &self.inner.seg;
        let n = seg.height() * seg.width();
        let d = seg.data();
        let mut out = Vec::with_capacity(4 * n);
        for p in 0..n {
            let region = (0..NUM_REGIONS).find(|&c| d[c * n + p] > 0.5).unwrap_or(0);
            out.extend_from_slice(&SEG_COLORS[region]);
            out.push(255);
        }
        out
    }

    /// Flat `[row, col, row, col, ...]` in lattice units.
    pub fn landmarks(&self) -> Vec<f64> {
        self.inner.landmarks.iter().flat_map(|&(r, c)| [r, c]).collect()
    }
}

pub fn scene(label: usize, seed: u64, occlusion: f64, grid: usize) -> ferfuse::Result<SceneSample> {
    let profile = DatasetProfile::occlufer_mini(grid, 0);
    let s = synth::generate_scene(label, seed, &profile)?;
    if occlusion > 0.0 {
        synth::apply_occlusion(&s, occlusion, synth::occlusion_seed(seed))
    } else {
        Ok(s)
    }
}

/// Generates one face of class `label` (0..8).
#[wasm_bindgen]
pub fn render_scene(label: usize, seed: u32, occlusion: f64, grid: usize) -> Result<Scene, JsError> {
    scene(label, seed as u64, occlusion, grid).map(|inner| Scene { inner }).map_err(js_err)
}

#[wasm_bindgen]
pub fn class_name(label: usize) -> String {
    CLASS_NAMES.get(label).copied().unwrap_or("?").to_owned()
}

pub fn breakdown(logits: &[f64], target: usize, lambda1: f64, lambda2: f64) -> ferfuse::Result<serde_json::Value> {
    let w = LossWeights { lambda1, lambda2 };
    w.validate()?;
    let ce = cross_entropy(logits, target)?;
    let (dare, d) = dare_loss(logits, target)?;
    Ok(serde_json::json!({
        "probs": softmax(logits),
        "ce": ce,
        "dare": dare,
        "total": w.lambda1 * ce + w.lambda2 * dare,
        "p_x": d.p_x,
        "alpha": d.alpha,
        "hardest": d.y_index,
        "z_y": d.z_y,
        "z_y_prime": d.z_y_prime,
    }))
}

/// CE, DARE and their weighted sum for one logit vector, as JSON.
#[wasm_bindgen]
pub fn loss_breakdown(logits: &[f64], target: usize, lambda1: f64, lambda2: f64) -> Result<String, JsError> {
    breakdown(logits, target, lambda1, lambda2).map(|v| v.to_string()).map_err(js_err)
}

/// Tiny model on a two-class profile, stepped from the page.
#[wasm_bindgen]
pub struct TinyTrainer {
    inner: Trainer<Model>,
    losses: Vec<f64>,
}

#[wasm_bindgen]
impl TinyTrainer {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, confusable: bool) -> Result<TinyTrainer, JsError> {
        Self::build(seed as u64, confusable).map_err(js_err)
    }

    /// Runs `n` optimizer steps and returns the last batch loss.
    pub fn step(&mut self, n: usize) -> Result<f64, JsError> {
        for _ in 0..n {
            let l = self.inner.step().map_err(js_err)?;
            self.losses.push(l);
        }
        Ok(self.losses.last().copied().unwrap_or(f64::NAN))
    }

    pub fn steps_done(&self) -> usize {
        self.inner.steps_done()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.losses.clone()
    }

    /// Clean validation accuracy.
    pub fn accuracy(&self) -> Result<f64, JsError> {
        self.inner.validate().map(|m| m.overall_accuracy).map_err(js_err)
    }
}

impl TinyTrainer {
    pub fn build(seed: u64, confusable: bool) -> ferfuse::Result<Self> {
        let mc = ModelConfig::tiny();
        let profile = if confusable {
            DatasetProfile::confusable_pair(30, 20, mc.grid, seed)
        } else {
            DatasetProfile::separable_pair(30, 20, mc.grid, seed)
        };
        let cfg = TrainConfig {
            seed,
            batch_size: 10,
            learning_rate: 1e-3,
            occlusion_augment: Vec::new(),
            ..TrainConfig::default()
        };
        let model = Model::new(mc, Ablation::default(), 2, cfg.init_seed())?;
        let train = synth::build_split(&profile, Split::Train, None)?;
        let val = synth::build_split(&profile, Split::Val, None)?;
        Ok(Self {
            inner: Trainer::new(model, cfg, train, val)?,
            losses: Vec::new(),
        })
    }

    pub fn step_native(&mut self, n: usize) -> ferfuse::Result<f64> {
        for _ in 0..n {
            let l = self.inner.step()?;
            self.losses.push(l);
        }
        Ok(self.losses.last().copied().unwrap_or(f64::NAN))
    }
}

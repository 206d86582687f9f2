//! The full classifier: convolutional image stem, landmark embedding,
//! segmentation-guided modulation and the cross-fusion pyramid.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::mcm::{mcm_forward_on, AttentionVars, FusionMode, McmParams};
use crate::params::{Affine, Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::ssgm::{ssgm_forward_on, SsgmParams};
use crate::synth::{self, SceneSample, NUM_LANDMARKS, NUM_REGIONS, PIXELS_PER_CELL};
use crate::tape::{Tape, Var};
use crate::tensor::TokenGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Token lattice side `g`; images are `4 * g` pixels.
    pub grid: usize,
    /// Feature width `D`.
    pub channels: usize,
    pub seg_channels: usize,
    /// Width of the shared segmentation convolution.
    pub hidden: usize,
    /// Width after the first stem convolution.
    pub stem_channels: usize,
    pub scales: usize,
    pub fusion_mode: FusionMode,
    pub landmarks: usize,
    pub heatmap_sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            channels: 32,
            seg_channels: NUM_REGIONS,
            hidden: 32,
            stem_channels: 16,
            scales: 3,
            fusion_mode: FusionMode::Concat,
            landmarks: NUM_LANDMARKS,
            heatmap_sigma: synth::HEATMAP_SIGMA,
        }
    }
}

impl ModelConfig {
    /// 4x4 lattice, `D = 8`, hidden width 8.
    pub fn tiny() -> Self {
        Self {
            grid: 4,
            channels: 8,
            hidden: 8,
            stem_channels: 4,
            scales: 2,
            ..Self::default()
        }
    }

    pub fn image_size(&self) -> usize {
        self.grid * PIXELS_PER_CELL
    }
}

/// Components removed for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Feed `spatial_norm(stem features)` to the pyramid.
    pub no_ssgm: bool,
    /// One cross-fusion block at full resolution.
    pub no_multiscale: bool,
    /// Drop the gated landmark addend; the gate stays at 0 and frozen.
    pub no_reintegration: bool,
    /// Train with cross-entropy only.
    pub no_dare: bool,
    /// Same effect on the model as `no_multiscale`.
    pub single_scale: bool,
}

impl Ablation {
    pub fn effective_scales(&self, cfg: &ModelConfig) -> usize {
        if self.no_multiscale || self.single_scale {
            1
        } else {
            cfg.scales
        }
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [
            (self.no_ssgm, "no_ssgm"),
            (self.no_multiscale, "no_multiscale"),
            (self.no_reintegration, "no_reintegration"),
            (self.no_dare, "no_dare"),
            (self.single_scale, "single_scale"),
        ] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StemParams {
    pub conv1: Affine,
    pub conv2: Affine,
}

/// Trainable image path: two `conv3x3 + relu + avgpool2` stages.
pub fn stem_forward_on(tape: &mut Tape, b: &Bound, p: &StemParams, image: Var) -> Result<Var> {
    let x = p.conv1.apply_conv(tape, b, image, 1)?;
    let x = tape.relu(x)?;
    let x = tape.avgpool2(x)?;
    let x = p.conv2.apply_conv(tape, b, x, 1)?;
    let x = tape.relu(x)?;
    tape.avgpool2(x)
}

/// Network inputs for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// `[3, 4g, 4g]`, centered to `[-0.5, 0.5]`.
    pub image: TokenGrid,
    pub seg: TokenGrid,
    pub heatmaps: TokenGrid,
}

impl ModelInput {
    pub fn from_scene(s: &SceneSample, sigma: f64) -> Result<Self> {
        let g = s.seg.height();
        let heatmaps = synth::render_landmark_heatmaps(&s.landmarks, g, s.seg.width(), sigma)?;
        let (c, h, w) = (s.image.channels(), s.image.height(), s.image.width());
        let image = TokenGrid::new(c, h, w, s.image.data().iter().map(|v| v - 0.5).collect())?;
        Ok(Self {
            image,
            seg: s.seg.clone(),
            heatmaps,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub num_classes: usize,
    pub params: ParamStore,
    pub stem: StemParams,
    pub lm_embed: Affine,
    pub ssgm: Option<SsgmParams>,
    pub mcm: McmParams,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub features: Var,
    pub attention: Vec<AttentionVars>,
    pub image_features: Var,
    pub fused_input: Var,
}

impl Model {
    pub fn new(config: ModelConfig, ablation: Ablation, num_classes: usize, seed: u64) -> Result<Self> {
        let scales = ablation.effective_scales(&config);
        if scales == 0 || config.channels == 0 || config.grid == 0 {
            return dim_err("model needs at least one scale, channel and grid cell");
        }
        if !config.grid.is_multiple_of(1 << (scales - 1)) {
            return dim_err(format!(
                "grid {} not divisible by 2^{}",
                config.grid,
                scales - 1
            ));
        }
        let mut rng = Rng::from_seed(seed);
        let mut params = ParamStore::new();
        let d = config.channels;
        let stem = StemParams {
            conv1: Affine::conv(&mut params, "stem.conv1", 3, config.stem_channels, 3, 0.0, &mut rng),
            conv2: Affine::conv(&mut params, "stem.conv2", config.stem_channels, d, 3, 0.0, &mut rng),
        };
        let lm_embed = Affine::conv(&mut params, "lm_embed", config.landmarks, d, 1, 0.0, &mut rng);
        let ssgm = (!ablation.no_ssgm).then(|| {
            SsgmParams::init(&mut params, "ssgm", config.seg_channels, config.hidden, d, &mut rng)
        });
        let mcm = McmParams::init(&mut params, "mcm", d, scales, num_classes, config.fusion_mode, &mut rng);
        if ablation.no_reintegration {
            for block in &mcm.scales {
                params.freeze(block.gate);
            }
        }
        Ok(Self {
            config,
            ablation,
            num_classes,
            params,
            stem,
            lm_embed,
            ssgm,
            mcm,
        })
    }

    pub fn gates(&self) -> Vec<ParamId> {
        self.mcm.scales.iter().map(|b| b.gate).collect()
    }

    /// Records one forward pass. `bound` must come from binding
    /// `self.params` to the same tape.
    pub fn forward_on(&self, tape: &mut Tape, bound: &Bound, input: &ModelInput) -> Result<ForwardOutput> {
        let g = self.config.grid;
        let check = |name: &str, grid: &TokenGrid, c: usize, side: usize| -> Result<()> {
            if grid.channels() != c || grid.height() != side || grid.width() != side {
                return dim_err(format!(
                    "{name}: expected [{c}, {side}, {side}], got [{}, {}, {}]",
                    grid.channels(),
                    grid.height(),
                    grid.width()
                ));
            }
            Ok(())
        };
        check("image", &input.image, 3, self.config.image_size())?;
        check("segmentation", &input.seg, self.config.seg_channels, g)?;
        check("heatmaps", &input.heatmaps, self.config.landmarks, g)?;

        let image = tape.constant(input.image.tensor().clone());
        let seg = tape.constant(input.seg.tensor().clone());
        let heat = tape.constant(input.heatmaps.tensor().clone());

        let image_features = stem_forward_on(tape, bound, &self.stem, image)?;
        let fused_input = match &self.ssgm {
            Some(p) => ssgm_forward_on(tape, bound, p, image_features, seg)?,
            None => tape.spatial_norm(image_features)?,
        };
        let lm = self.lm_embed.apply_conv(tape, bound, heat, 0)?;
        let out = mcm_forward_on(
            tape,
            bound,
            &self.mcm,
            fused_input,
            lm,
            !self.ablation.no_reintegration,
        )?;
        Ok(ForwardOutput {
            logits: out.logits,
            features: out.features,
            attention: out.attention,
            image_features,
            fused_input,
        })
    }

    pub fn logits(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let out = self.forward_on(&mut tape, &b, input)?;
        Ok(tape.data(out.logits).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::count_params;
    use crate::synth::DatasetProfile;

    #[test]
    fn forward_shapes() {
        let cfg = ModelConfig::tiny();
        let model = Model::new(cfg.clone(), Ablation::default(), 3, 1).unwrap();
        let p = DatasetProfile::uniform(3, 1, 1, cfg.grid, 0);
        let s = synth::generate_scene(1, 4, &p).unwrap();
        let input = ModelInput::from_scene(&s, cfg.heatmap_sigma).unwrap();
        assert_eq!(model.logits(&input).unwrap().len(), 3);
    }

    #[test]
    fn ablations_change_structure() {
        let cfg = ModelConfig::tiny();
        let full = Model::new(cfg.clone(), Ablation::default(), 3, 1).unwrap();
        let no_ssgm = Model::new(cfg.clone(), Ablation { no_ssgm: true, ..Default::default() }, 3, 1).unwrap();
        let single = Model::new(cfg.clone(), Ablation { single_scale: true, ..Default::default() }, 3, 1).unwrap();
        assert!(no_ssgm.ssgm.is_none());
        assert_eq!(single.mcm.scales.len(), 1);
        assert!(count_params(&no_ssgm.params).total < count_params(&full.params).total);
        let no_re = Model::new(cfg, Ablation { no_reintegration: true, ..Default::default() }, 3, 1).unwrap();
        assert!(no_re.gates().iter().all(|&g| no_re.params.is_frozen(g)));
    }

    #[test]
    fn rejects_wrong_input_extents() {
        let cfg = ModelConfig::tiny();
        let model = Model::new(cfg, Ablation::default(), 3, 1).unwrap();
        let input = ModelInput {
            image: TokenGrid::zeros(3, 8, 8),
            seg: TokenGrid::zeros(6, 4, 4),
            heatmaps: TokenGrid::zeros(5, 4, 4),
        };
        assert!(model.logits(&input).is_err());
    }
}

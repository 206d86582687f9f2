//! Run configuration files.
//!
//! Every field has a default, so `{}` is a complete config. Unknown keys
//! and invariant violations are reported with the dotted key path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::{DatasetProfile, NUM_LANDMARKS, NUM_REGIONS};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Benchmark class proportions at one tenth of the counts.
    #[default]
    OccluferMini,
    /// Benchmark class proportions times `scale`.
    Occlufer,
    Uniform,
    SeparablePair,
    ConfusablePair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub preset: Preset,
    pub seed: u64,
    /// Count multiplier of the `occlufer` preset.
    pub scale: f64,
    /// Class count of the `uniform` preset.
    pub classes: usize,
    pub per_class: usize,
    pub val_per_class: usize,
    /// Replace the preset's per-class counts.
    pub train_counts: Option<Vec<usize>>,
    pub val_counts: Option<Vec<usize>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            preset: Preset::OccluferMini,
            seed: 0,
            scale: 1.0,
            classes: 8,
            per_class: 50,
            val_per_class: 10,
            train_counts: None,
            val_counts: None,
        }
    }
}

impl DataConfig {
    pub fn profile(&self, grid: usize) -> DatasetProfile {
        let (n, v, seed) = (self.per_class, self.val_per_class, self.seed);
        let mut p = match self.preset {
            Preset::OccluferMini => DatasetProfile::occlufer_mini(grid, seed),
            Preset::Occlufer => DatasetProfile::occlufer(self.scale, grid, seed),
            Preset::Uniform => DatasetProfile::uniform(self.classes, n, v, grid, seed),
            Preset::SeparablePair => DatasetProfile::separable_pair(n, v, grid, seed),
            Preset::ConfusablePair => DatasetProfile::confusable_pair(n, v, grid, seed),
        };
        if let Some(c) = &self.train_counts {
            p.train_counts = c.clone();
        }
        if let Some(c) = &self.val_counts {
            p.val_counts = c.clone();
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn config_err<T>(path: &str, msg: impl Into<String>) -> Result<T> {
    Err(Error::Config {
        path: path.into(),
        msg: msg.into(),
    })
}

impl RunConfig {
    pub fn profile(&self) -> DatasetProfile {
        self.data.profile(self.model.grid)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.grid < 2 {
            return config_err("model.grid", "must be >= 2");
        }
        if m.channels == 0 {
            return config_err("model.channels", "must be >= 1");
        }
        if m.hidden == 0 {
            return config_err("model.hidden", "must be >= 1");
        }
        if m.stem_channels == 0 {
            return config_err("model.stem_channels", "must be >= 1");
        }
        if m.scales == 0 || m.scales > 8 {
            return config_err("model.scales", "must lie in 1..=8");
        }
        if !m.grid.is_multiple_of(1 << (m.scales - 1)) {
            return config_err("model.scales", format!("grid {} is not divisible by 2^{}", m.grid, m.scales - 1));
        }
        if m.seg_channels != NUM_REGIONS {
            return config_err("model.seg_channels", format!("the generator emits {NUM_REGIONS} region channels"));
        }
        if m.landmarks != NUM_LANDMARKS {
            return config_err("model.landmarks", format!("the generator emits {NUM_LANDMARKS} landmarks"));
        }
        if !(m.heatmap_sigma > 0.0 && m.heatmap_sigma.is_finite()) {
            return config_err("model.heatmap_sigma", "must be > 0");
        }
        self.train.validate("train")?;
        if self.data.preset == Preset::Occlufer && !(self.data.scale > 0.0 && self.data.scale.is_finite()) {
            return config_err("data.scale", "must be > 0");
        }
        if self.data.preset == Preset::Uniform && self.data.classes < 2 {
            return config_err("data.classes", "must be >= 2");
        }
        if let Err(e) = self.profile().validate() {
            return config_err("data", e.to_string());
        }
        Ok(())
    }
}

/// Parses and validates JSON config text.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config {
            path: if path == "." { "<root>".into() } else { path },
            msg: e.into_inner().to_string(),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
        path: path.display().to_string(),
        msg: format!("cannot read config file: {e}"),
    })?;
    parse_config_str(&text)
}

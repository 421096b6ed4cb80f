//! Pipeline configuration: defaults < file < flags. Every run writes its
//! resolved snapshot so artifacts are replayable.

use crate::datagen::SceneGenConfig;
use crate::diffusion::DiffusionConfig;
use crate::encoder::EncoderConfig;
use crate::error::{AliError, Result};
use crate::priors::{PriorTrainConfig, VisualPriorConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Corpus shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub lights: usize,
    pub scene: SceneGenConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_scenes: 200,
            test_scenes: 20,
            lights: 8,
            scene: SceneGenConfig::default(),
        }
    }
}

/// Optimization knobs shared by the training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Reference learning rate; the effective rate is `lr_base * lr_multiplier`.
    pub lr_base: f64,
    /// Compensates for the much smaller model trained here.
    pub lr_multiplier: f64,
    pub weight_decay: f64,
    /// Coding-rate temperature.
    pub lambda: f64,
    pub stage0_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    /// Scene groups per stage-0/1 batch.
    pub groups_per_batch: usize,
    /// Lightings per group.
    pub views_per_group: usize,
    /// Pair batch size for stages 2 and 3.
    pub pair_batch: usize,
    /// Identity-pair fraction for stage 3.
    pub identity_mix: f64,
    /// Pseudo-relit versions per zoo source.
    pub zoo_k: usize,
    /// Zoo sources cap: `min(available, configured)`.
    pub zoo_sources: usize,
    /// Diffusion training steps.
    pub t_max: usize,
    /// Ancestral sampling steps at inference.
    pub sample_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_base: 4e-5,
            lr_multiplier: 10.0,
            weight_decay: 0.01,
            lambda: 1.0,
            stage0_epochs: 12,
            stage1_epochs: 4,
            stage2_epochs: 6,
            stage3_epochs: 2,
            groups_per_batch: 6,
            views_per_group: 4,
            pair_batch: 16,
            identity_mix: 0.10,
            zoo_k: 7,
            zoo_sources: 1000,
            t_max: 100,
            sample_steps: 50,
        }
    }
}

impl TrainConfig {
    pub fn effective_lr(&self) -> f64 {
        self.lr_base * self.lr_multiplier
    }
}

/// Evaluation protocol knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Reference lighting conditions per cross-scene trial (capped at the
    /// number of available conditions).
    pub n_refs: usize,
    /// In-scene pairing offset; 0 means "half the light count".
    pub offset: usize,
    /// Trials cap for the cross-scene protocol (0 = every test scene).
    pub max_trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_refs: 12,
            offset: 0,
            max_trials: 0,
        }
    }
}

/// Resolved configuration for every pipeline entry point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub precision: Precision,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub prior: VisualPriorConfig,
    pub prior_train: PriorTrainConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        self.encoder.validate()?;
        self.prior.validate()?;
        if self.data.lights < 2 {
            return Err(AliError::Config("need at least two lights".into()));
        }
        if self.train.views_per_group < 1 {
            return Err(AliError::Config("views_per_group must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.train.identity_mix) {
            return Err(AliError::Config("identity_mix must be in [0,1]".into()));
        }
        let div = 1usize << self.encoder.n_levels();
        if self.data.scene.height % div != 0 || self.data.scene.width % div != 0 {
            return Err(AliError::Config(format!(
                "scene size {}x{} not divisible by 2^{}",
                self.data.scene.height,
                self.data.scene.width,
                self.encoder.n_levels()
            )));
        }
        if self.data.scene.height % (2 * self.diffusion.latent_factor) != 0 {
            return Err(AliError::Config(
                "scene height must divide twice the latent factor".into(),
            ));
        }
        Ok(())
    }

    /// TOML over the built-in defaults.
    pub fn load_layered(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            None => PipelineConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text).map_err(|e| AliError::Config(format!("{p:?}: {e}")))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| AliError::Serde(e.to_string()))
    }

    /// Write the resolved snapshot next to a run's artifacts.
    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn digest(&self) -> Result<String> {
        Ok(crate::digest::digest_bytes(self.to_toml()?.as_bytes()))
    }

    /// In-scene pairing offset, defaulting to half the light count.
    pub fn in_scene_offset(&self) -> usize {
        if self.eval.offset == 0 {
            self.data.lights / 2
        } else {
            self.eval.offset
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_file_layers_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.toml");
        std::fs::write(&p, "[train]\nstage0_epochs = 3\n").unwrap();
        let cfg = PipelineConfig::load_layered(Some(&p)).unwrap();
        assert_eq!(cfg.train.stage0_epochs, 3);
        assert_eq!(cfg.train.stage1_epochs, TrainConfig::default().stage1_epochs);
    }

    #[test]
    fn invalid_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.data.scene.height = 20; // not divisible by 8
        assert!(cfg.validate().is_err());
    }
}

//! Training configuration: hyperparameters, seeds, and ablation flags,
//! loadable from TOML.

use crate::compositor::RenderConfig;
use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::objectives::LossWeights;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Switches that map one-to-one onto the architecture and loss ablation
/// rows: the two-stream split, the eye-feature rotation, and the three
/// optional loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Separate eye and face-without-eyes fields (off = single-MLP vanilla
    /// form with the gaze label concatenated to the conditioning).
    pub two_stream: bool,
    /// Rigid rotation of the eye feature grid by the gaze rotation matrix.
    pub rotation: bool,
    /// Functional (gaze-consistency) loss term.
    pub functional: bool,
    /// Perceptual loss term.
    pub perceptual: bool,
    /// Latent disentanglement loss term.
    pub disentangle: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            two_stream: true,
            rotation: true,
            functional: true,
            perceptual: true,
            disentangle: true,
        }
    }
}

/// Full training configuration. Every field has a default, so partial TOML
/// files parse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Total optimization steps.
    pub steps: u64,
    /// Steps per epoch for the functional-loss weight schedule.
    pub steps_per_epoch: u64,
    /// Low-resolution rays consumed per step; divided by `low_res^2` to get
    /// the number of images rendered per step.
    pub rays_per_step: usize,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Weight of the auxiliary background-to-black term that pushes
    /// rendered pixels outside every mask toward black.
    pub background_weight: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub seed: u64,
    /// Noise added to subject latent initializations around `z0`.
    pub latent_noise: f64,
    pub weights: LossWeights,
    pub field: FieldConfig,
    pub render: RenderConfig,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            steps: 5000,
            steps_per_epoch: 500,
            rays_per_step: 1024,
            clip_norm: 10.0,
            background_weight: 0.1,
            checkpoint_every: 1000,
            log_every: 10,
            seed: 0,
            latent_noise: 0.05,
            weights: LossWeights::default(),
            field: FieldConfig::default(),
            render: RenderConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.field.validate()?;
        self.render.validate()?;
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        let rays_per_image = self.render.low_res * self.render.low_res;
        if self.rays_per_step < rays_per_image {
            return Err(Error::Config(format!(
                "rays_per_step {} below one image ({} rays)",
                self.rays_per_step, rays_per_image
            )));
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::Config("checkpoint_every/log_every must be positive".into()));
        }
        Ok(())
    }

    /// Images rendered per optimization step.
    pub fn images_per_step(&self) -> usize {
        self.rays_per_step / (self.render.low_res * self.render.low_res)
    }

    /// Epoch of a given step under the functional-loss schedule.
    pub fn epoch_of_step(&self, step: u64) -> u64 {
        step / self.steps_per_epoch
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_toml(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }
}

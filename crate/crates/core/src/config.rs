//! The pipeline configuration file.
//!
//! A JSON object whose sections mirror the module configs. Every section
//! and key is optional and defaults as documented on the field; unknown
//! keys are rejected.
//!
//! ```json
//! {
//!   "seed": 0,
//!   "data": "demo",
//!   "matcher": { "census_radius": 2, "aggregation_radius": 3, "levels": 3,
//!                "local_search": 2, "gauss_newton_sweeps": 3, "lr_threshold": 1.0 },
//!   "pseudo_gt": { "aggregation_radius": 4, "lr_threshold": 0.5 },
//!   "cascade": { "planes": [48, 32, 8], "guide_range": { "relative": 0.1 },
//!                "tau": 0.5, "smoothing_sigma": 1.0 },
//!   "renderer": { "samples": 32, "hidden": 32 },
//!   "losses": { "self_depth": 0.1, "stereo_depth": 1.0, "lambda1": 0.1,
//!               "lambda2": 0.1, "lambda3": 1.0, "gamma": 0.9, "beta": 1.0 },
//!   "train": { "iterations": 2000, "rays_per_batch": 512, "learning_rate": 5e-4,
//!              "lr_floor": 0.0, "adam_beta1": 0.9, "adam_beta2": 0.999,
//!              "adam_eps": 1e-8, "source_pairs": 3, "calibration_interval": 500,
//!              "held_out": [3],
//!              "toggles": { "sam": true, "correlated_features": true,
//!                           "dgps": true, "stereo_loss": true } }
//! }
//! ```
//!
//! Omitted keys inside `pseudo_gt` fall back to the general matcher
//! defaults, not to the strict profile; give the full profile to change it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::costvol::CascadeConfig;
use crate::error::{Error, Result};
use crate::features::FusionOptions;
use crate::losses::LossWeights;
use crate::render::RendererConfig;
use crate::scene::SceneOptions;
use crate::stereo::MatcherProfile;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds the fusion projections, the renderer init and every training
    /// draw.
    pub seed: u64,
    /// Dataset directory; command-line flags take precedence.
    pub data: Option<PathBuf>,
    pub matcher: MatcherProfile,
    #[serde(default = "MatcherProfile::pseudo_gt")]
    pub pseudo_gt: MatcherProfile,
    pub cascade: CascadeConfig,
    pub renderer: RendererConfig,
    pub losses: LossWeights,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            matcher: MatcherProfile::default(),
            pseudo_gt: MatcherProfile::pseudo_gt(),
            cascade: CascadeConfig::default(),
            renderer: RendererConfig::default(),
            losses: LossWeights::default(),
            train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses and validates. Unknown keys are reported by name.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.matcher.validate()?;
        self.pseudo_gt.validate()?;
        self.cascade.validate()?;
        self.renderer.validate()?;
        self.losses.validate()?;
        self.train.validate()
    }

    /// Scene-build options with the toggles applied.
    pub fn scene_options(&self) -> SceneOptions {
        let t = self.train.toggles;
        SceneOptions {
            seed: self.seed,
            matcher: self.matcher,
            pseudo_gt: self.pseudo_gt,
            cascade: CascadeConfig { dgps: t.dgps, ..self.cascade },
            fusion: FusionOptions { sam: t.sam, correlated: t.correlated_features },
            held_out: self.train.held_out.clone(),
            losses: self.effective_losses(),
        }
    }

    /// Loss weights with the stereo-loss toggle applied.
    pub fn effective_losses(&self) -> LossWeights {
        let mut w = self.losses;
        if !self.train.toggles.stereo_loss {
            w.stereo_depth = 0.0;
        }
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        assert_eq!(PipelineConfig::from_json("{}").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut c = PipelineConfig { seed: 9, ..Default::default() };
        c.train.iterations = 12;
        c.train.toggles.dgps = false;
        assert_eq!(PipelineConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = PipelineConfig::from_json(r#"{"train": {"iterationz": 5}}"#).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("iterationz")), "{err}");
        let err = PipelineConfig::from_json(r#"{"bogus": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(PipelineConfig::from_json(r#"{"losses": {"gamma": 1.5}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"cascade": {"planes": [48, 1, 8]}}"#).is_err());
    }

    #[test]
    fn stereo_loss_toggle_zeroes_its_weight() {
        let mut c = PipelineConfig::default();
        c.train.toggles.stereo_loss = false;
        assert_eq!(c.effective_losses().stereo_depth, 0.0);
        assert_eq!(c.effective_losses().self_depth, 0.1);
    }
}

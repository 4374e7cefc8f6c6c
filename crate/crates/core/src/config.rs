//! The JSON run configuration.
//!
//! Every section and every key is optional; missing values take the
//! defaults below, unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{Aggregation, EvalOptions, ScoreSource, DEFAULT_TAU};
use crate::geo_losses::{noisy_teacher, GeoLossWeights};
use crate::geometry::GeometryParams;
use crate::model::{Objective, TrainConfig, TrainingSample};
use crate::pdt_losses::PerspectiveConfig;
use crate::scenes::{scene_seed, Preset, Scene, SceneParams};
use crate::uncertainty::UncertaintyParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdtSection {
    pub conservative: PerspectiveConfig,
    pub neutral: PerspectiveConfig,
    pub aggressive: PerspectiveConfig,
}

impl Default for PdtSection {
    fn default() -> Self {
        Self {
            conservative: PerspectiveConfig::conservative(),
            neutral: PerspectiveConfig::neutral(),
            aggressive: PerspectiveConfig::aggressive(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub tau: f64,
    pub aggregation: Aggregation,
    pub source: ScoreSource,
    pub corruption_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            aggregation: Aggregation::Micro,
            source: ScoreSource::Fused,
            corruption_seed: 0,
        }
    }
}

/// Scene generation settings. Optional fields override the preset's defaults.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub preset: Preset,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band_width: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub obstacle_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub texture_noise: Option<f64>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            preset: Preset::Mixed,
            seed: 0,
            height: 64,
            width: 64,
            amplitude: None,
            band_width: None,
            obstacle_count: None,
            texture_noise: None,
        }
    }
}

impl DataSection {
    pub fn scene_params(&self, rng_seed: u64) -> SceneParams {
        let base = SceneParams::preset(self.preset, rng_seed, self.height, self.width);
        SceneParams {
            amplitude: self.amplitude.unwrap_or(base.amplitude),
            band_width: self.band_width.unwrap_or(base.band_width),
            obstacle_count: self.obstacle_count.unwrap_or(base.obstacle_count),
            texture_noise: self.texture_noise.unwrap_or(base.texture_noise),
            ..base
        }
    }

    /// Parameters of the first `count` scenes drawn from `seed`.
    pub fn dataset_params(&self, count: usize) -> Vec<SceneParams> {
        (0..count)
            .map(|i| self.scene_params(scene_seed(self.seed, i)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub pdt: PdtSection,
    pub uncertainty: UncertaintyParams,
    pub geometry: GeometryParams,
    pub geo_loss: GeoLossWeights,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub data: DataSection,
}

impl RunConfig {
    /// Parses and validates; errors name the offending key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at '{path}': {}", e.into_inner()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |section: &str, r: Result<()>| {
            r.map_err(|e| Error::Config(format!("section '{section}': {e}")))
        };
        for p in [
            &self.pdt.conservative,
            &self.pdt.neutral,
            &self.pdt.aggressive,
        ] {
            wrap("pdt", p.validate())?;
        }
        wrap("uncertainty", self.uncertainty.validate())?;
        if !(self.geometry.beta.is_finite() && self.geometry.beta > 0.0) {
            return Err(Error::Config(format!(
                "section 'geometry': beta must be > 0, got {}",
                self.geometry.beta
            )));
        }
        wrap("geo_loss", self.geo_loss.validate())?;
        wrap("train", self.train.validate())?;
        if !(self.eval.tau > 0.0 && self.eval.tau < 1.0) {
            return Err(Error::Config(format!(
                "section 'eval': tau must lie in (0, 1), got {}",
                self.eval.tau
            )));
        }
        wrap("data", self.data.scene_params(0).validate())
    }

    pub fn objective(&self) -> Objective {
        Objective {
            perspectives: [self.pdt.conservative, self.pdt.neutral, self.pdt.aggressive],
            geo: self.geo_loss,
        }
    }

    /// Supervision for each scene. The teacher depth, which also feeds the
    /// risk pseudo labels, carries the configured noise seeded per scene.
    pub fn training_samples(&self, scenes: &[Scene]) -> Result<Vec<TrainingSample>> {
        use rayon::prelude::*;
        scenes
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let seed = scene_seed(self.train.rng_seed, i);
                let teacher = noisy_teacher(&s.depth, self.geo_loss.teacher_noise_sigma, seed)?;
                TrainingSample::new(&s.rgb, &teacher, &s.label, self.geometry.beta)
            })
            .collect()
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            tau: self.eval.tau,
            aggregation: self.eval.aggregation,
            source: self.eval.source,
            corruption: None,
            corruption_seed: self.eval.corruption_seed,
            uncertainty: self.uncertainty,
        }
    }

    /// Pretty JSON with every default filled in.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.uncertainty.alpha, 0.7);
        assert_eq!(c.geometry.beta, 3.0);
        assert_eq!(c.geo_loss.lambda_geo, 2.0);
        assert_eq!(c.eval.tau, 0.5);
        assert_eq!(c.pdt.conservative.gamma, 0.2);
        assert_eq!(c.train.epochs, 10);
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let c = RunConfig::from_json(r#"{"train": {"epochs": 3}, "data": {"preset": "easy"}}"#)
            .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(c.data.preset, Preset::Easy);
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::from_json(r#"{"data": {"band_width": 4.0}}"#).unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn documented_geo_loss_keys_are_accepted() {
        let c = RunConfig::from_json(
            r#"{"geo_loss": {"lambda_slope": 1.0, "lambda_elev": 1.0, "lambda_geo": 2.0, "teacher_noise_sigma": 0.0}}"#,
        )
        .unwrap();
        assert_eq!(c.geo_loss, GeoLossWeights::default());
    }

    #[test]
    fn teacher_noise_only_touches_the_depth_supervision() {
        let scenes = crate::scenes::generate_dataset(Preset::Mixed, 1, 2, 24, 24).unwrap();
        let clean = RunConfig::default().training_samples(&scenes).unwrap();
        assert_eq!(clean[0].teacher_depth, scenes[0].depth);
        let mut noisy_cfg = RunConfig::default();
        noisy_cfg.geo_loss.teacher_noise_sigma = 0.05;
        let noisy = noisy_cfg.training_samples(&scenes).unwrap();
        assert_ne!(noisy[0].teacher_depth, scenes[0].depth);
        assert_eq!(noisy[0].label, clean[0].label);
        assert_eq!(noisy[0].features, clean[0].features);
    }

    #[test]
    fn errors_name_the_key() {
        let e = RunConfig::from_json(r#"{"data": {"preset": "rocky"}}"#).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("data.preset"), "{msg}");
        assert!(msg.contains("rocky"), "{msg}");

        let e = RunConfig::from_json(r#"{"train": {"epoch": 3}}"#).unwrap_err();
        assert!(e.to_string().contains("epoch"), "{e}");

        let e = RunConfig::from_json(r#"{"uncertainty": {"alpha": 1.5}}"#).unwrap_err();
        assert!(e.to_string().contains("uncertainty"), "{e}");
        assert!(matches!(e, Error::Config(_)));
    }
}

//! Run configuration files and deterministic dataset construction.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cda::CdaConfig;
use crate::data::{generate_scene, split_dataset, DatasetSplit, PointCloud, SceneConfig};
use crate::error::{Error, Result};
use crate::mixing::ElevationSpan;
use crate::repr::ReprConfig;
use crate::rng::SeedStreams;
use crate::students::DEFAULT_HIDDEN;
use crate::trainer::{TrainConfig, TrainMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Training scenes, split into labeled and unlabeled.
    pub scenes: usize,
    pub validation_scenes: usize,
    pub label_fraction: f64,
    /// Master seed for every random stream of the run.
    pub seed: u64,
    pub scene: SceneConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            scenes: 200,
            validation_scenes: 40,
            label_fraction: 0.1,
            seed: 0,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub mode: TrainMode,
    pub epochs: usize,
    pub lambda0: f64,
    pub delta0: f64,
    pub lambda_reg: f64,
    pub learning_rate: f64,
    pub hidden: usize,
    pub fixed_threshold: Option<f64>,
    pub supervised_regularization: bool,
    pub log_window: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            mode: TrainMode::Collis,
            epochs: 60,
            lambda0: 0.5,
            delta0: 0.95,
            lambda_reg: 0.1,
            learning_rate: 0.05,
            hidden: DEFAULT_HIDDEN,
            fixed_threshold: None,
            supervised_regularization: false,
            log_window: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Write per-student checkpoints at every epoch end.
    pub checkpoints: bool,
    /// Include one line per training step in the metrics log.
    pub step_records: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            checkpoints: true,
            step_records: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub representations: Vec<ReprConfig>,
    pub training: TrainingSection,
    pub cda: CdaConfig,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSection::default(),
            representations: vec![
                ReprConfig::default_range(),
                ReprConfig::default_polar(),
                ReprConfig::default_voxel(),
            ],
            training: TrainingSection::default(),
            cda: CdaConfig::default(),
            output: OutputSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.scenes < 2 {
            return Err(Error::Config("data.scenes must be at least 2".into()));
        }
        if !(d.label_fraction > 0.0 && d.label_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data.label_fraction must be in (0, 1], got {}",
                d.label_fraction
            )));
        }
        d.scene.validate()?;
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            mode: t.mode,
            epochs: t.epochs,
            lambda0: t.lambda0,
            delta0: t.delta0,
            lambda_reg: t.lambda_reg,
            learning_rate: t.learning_rate,
            hidden: t.hidden,
            seed: self.data.seed,
            cda: self.cda,
            roster: self.representations.clone(),
            fixed_threshold: t.fixed_threshold,
            supervised_regularization: t.supervised_regularization,
            log_window: t.log_window,
            span: ElevationSpan {
                up_deg: self.data.scene.fov_up_deg,
                down_deg: self.data.scene.fov_down_deg,
            },
        }
    }

    pub fn num_classes(&self) -> usize {
        self.data.scene.num_classes()
    }
}

fn generate_many(streams: &SeedStreams, name: &str, count: usize, scene: &SceneConfig) -> Result<Vec<PointCloud>> {
    (0..count)
        .into_par_iter()
        .map(|i| generate_scene(streams.seed(name, i as u64), scene))
        .collect()
}

/// Validation scenes for a data section.
pub fn build_validation(data: &DataSection) -> Result<Vec<PointCloud>> {
    generate_many(&SeedStreams::new(data.seed), "validation", data.validation_scenes, &data.scene)
}

/// Generates, splits and seals the training scenes; a pure function of the section.
pub fn build_dataset(data: &DataSection) -> Result<DatasetSplit> {
    let streams = SeedStreams::new(data.seed);
    let scenes = generate_many(&streams, "scene", data.scenes, &data.scene)?;
    let mut rng = streams.stream("split", 0);
    split_dataset(scenes, data.label_fraction, &mut rng)?.with_validation(build_validation(data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c = RunConfig::from_json(r#"{"training": {"epochs": 3}, "data": {"seed": 9}}"#).unwrap();
        assert_eq!(c.training.epochs, 3);
        assert_eq!(c.train_config().seed, 9);
        assert_eq!(c.representations.len(), 3);
    }

    #[test]
    fn unknown_keys_are_named() {
        for text in [
            r#"{"trainig": {}}"#,
            r#"{"training": {"epoch": 3}}"#,
            r#"{"data": {"scene": {"rays": 3}}}"#,
            r#"{"representations": [{"kind": "range", "rows": 4, "cols": 4, "fov_up_deg": 1, "fov_down_deg": -1, "bogus": 1}]}"#,
        ] {
            let err = RunConfig::from_json(text).unwrap_err().to_string();
            let key = ["trainig", "epoch", "rays", "bogus"]
                .into_iter()
                .find(|k| text.contains(k))
                .unwrap();
            assert!(err.contains(key), "{err}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_json(r#"{"data": {"label_fraction": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"training": {"epochs": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"representations": []}"#).is_err());
    }

    #[test]
    fn dataset_is_deterministic() {
        let data = DataSection {
            scenes: 6,
            validation_scenes: 2,
            label_fraction: 0.5,
            ..DataSection::default()
        };
        let a = build_dataset(&data).unwrap();
        let b = build_dataset(&data).unwrap();
        assert_eq!(a.labeled, b.labeled);
        assert_eq!(a.unlabeled, b.unlabeled);
        assert_eq!(a.validation, b.validation);
        assert_eq!((a.labeled.len(), a.unlabeled.len(), a.validation.len()), (3, 3, 2));
        assert!(a.unlabeled.iter().all(|s| s.labels().is_none()));
        assert_eq!(a.sealed.len(), 3);
    }
}

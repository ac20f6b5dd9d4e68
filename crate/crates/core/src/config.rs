//! Flat run configuration shared by the command line, the service and the
//! acceptance suite.
//!
//! Every key is optional in the JSON file; missing keys take the defaults
//! below. Unknown keys are rejected so that typos do not silently fall back.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::{AlignConfig, Threshold};
use crate::classifier::TrainConfig;
use crate::dataset::{presets, synth_class_name, ExperimentSetting, ExpertMode, SplitRatio};
use crate::evaluation::ExperimentConfig;
use crate::pipeline::{ClusteringConfig, ModelShape, PipelineConfig, StopRule};
use crate::updater::ConsistencyConfig;
use crate::{Error, Result};

/// How detected unknown groups are answered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    NoExpert,
    WithExpert,
    /// Groups wait for verdicts posted to the service.
    Interactive,
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-expert" => Ok(Self::NoExpert),
            "with-expert" => Ok(Self::WithExpert),
            "interactive" => Ok(Self::Interactive),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected no-expert, with-expert or interactive)"
            ))),
        }
    }
}

/// Named class partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SettingName {
    /// First `synth_known` synthetic classes known, the rest unknown.
    Synthetic,
    IscxTorSetting1,
    IscxTorSetting2,
    /// `known_classes` and `unknown_classes` from the config.
    Custom,
}

impl std::str::FromStr for SettingName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "iscx_tor_setting1" | "setting1" => Ok(Self::IscxTorSetting1),
            "iscx_tor_setting2" | "setting2" => Ok(Self::IscxTorSetting2),
            "custom" => Ok(Self::Custom),
            other => Err(Error::Config(format!(
                "unknown setting `{other}` (expected synthetic, setting1, setting2 or custom)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: RunMode,
    pub setting: SettingName,
    /// Input records; `None` generates the synthetic benchmark.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub port: u16,

    pub known_classes: Vec<String>,
    pub unknown_classes: Vec<String>,
    pub known_fraction: f64,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,

    pub synth_classes: usize,
    pub synth_known: usize,
    pub synth_per_class: usize,
    pub synth_dim: usize,
    pub synth_separation: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub weight_decay: f64,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub warm_start: bool,

    /// Explicit squared-distance alignment threshold; overrides `align_scale`.
    pub align_threshold: Option<f64>,
    /// Multiplier on the median nearest squared centroid gap.
    pub align_scale: f64,
    pub align_fallback: Option<f64>,

    pub top_fraction: f64,
    pub bottom_fraction: f64,

    pub eps: Option<f64>,
    pub eps_quantile: f64,
    pub min_pts: Option<usize>,

    pub max_steps: u64,
    pub quiet_steps: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let model = ModelShape::default();
        let split = SplitRatio::default();
        let clustering = ClusteringConfig::default();
        let consistency = ConsistencyConfig::default();
        let stop = StopRule::default();
        Self {
            seed: 0,
            mode: RunMode::NoExpert,
            setting: SettingName::Synthetic,
            data: None,
            out: None,
            port: 8080,
            known_classes: Vec::new(),
            unknown_classes: Vec::new(),
            known_fraction: 0.30,
            split_train: split.train,
            split_val: split.val,
            split_test: split.test,
            synth_classes: 5,
            synth_known: 3,
            synth_per_class: 200,
            synth_dim: 20,
            synth_separation: 8.0,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            patience: train.patience,
            weight_decay: train.weight_decay,
            hidden: model.hidden,
            embedding_dim: model.embedding_dim,
            warm_start: true,
            align_threshold: None,
            align_scale: 0.5,
            align_fallback: None,
            top_fraction: consistency.top_fraction,
            bottom_fraction: consistency.bottom_fraction,
            eps: clustering.eps,
            eps_quantile: clustering.eps_quantile,
            min_pts: clustering.min_pts,
            max_steps: stop.max_steps,
            quiet_steps: stop.quiet_steps,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn expert_mode(&self) -> ExpertMode {
        match self.mode {
            RunMode::WithExpert => ExpertMode::WithExpert,
            RunMode::NoExpert | RunMode::Interactive => ExpertMode::NoExpert,
        }
    }

    pub fn setting(&self) -> Result<ExperimentSetting> {
        let mut s = match self.setting {
            SettingName::Synthetic => {
                if self.synth_known == 0 || self.synth_known > self.synth_classes {
                    return Err(Error::Config(format!(
                        "synth_known must be in 1..={}, got {}",
                        self.synth_classes, self.synth_known
                    )));
                }
                let names: Vec<String> = (0..self.synth_classes)
                    .map(|i| synth_class_name(i, self.synth_classes))
                    .collect();
                ExperimentSetting::new(
                    names[..self.synth_known].to_vec(),
                    names[self.synth_known..].to_vec(),
                )
            }
            SettingName::IscxTorSetting1 => presets::iscx_tor_setting1(),
            SettingName::IscxTorSetting2 => presets::iscx_tor_setting2(),
            SettingName::Custom => {
                ExperimentSetting::new(self.known_classes.clone(), self.unknown_classes.clone())
            }
        };
        s.known_fraction = self.known_fraction;
        s.split_ratio = SplitRatio {
            train: self.split_train,
            val: self.split_val,
            test: self.split_test,
        };
        s.expert_mode = self.expert_mode();
        s.seed = self.seed;
        s.validate()?;
        Ok(s)
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let threshold = match self.align_threshold {
            Some(value) => Threshold::Explicit { value },
            None => Threshold::Adaptive {
                scale: self.align_scale,
            },
        };
        let cfg = PipelineConfig {
            train: TrainConfig {
                epochs: self.epochs,
                batch_size: self.batch_size,
                learning_rate: self.learning_rate,
                patience: self.patience,
                weight_decay: self.weight_decay,
                seed: self.seed,
            },
            align: AlignConfig {
                threshold,
                fallback: self.align_fallback,
            },
            consistency: ConsistencyConfig {
                top_fraction: self.top_fraction,
                bottom_fraction: self.bottom_fraction,
            },
            clustering: ClusteringConfig {
                eps: self.eps,
                eps_quantile: self.eps_quantile,
                min_pts: self.min_pts,
            },
            model: ModelShape {
                hidden: self.hidden.clone(),
                embedding_dim: self.embedding_dim,
            },
            warm_start: self.warm_start,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn stop(&self) -> Result<StopRule> {
        let stop = StopRule {
            max_steps: self.max_steps,
            quiet_steps: self.quiet_steps,
        };
        stop.validate()?;
        Ok(stop)
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        Ok(ExperimentConfig {
            pipeline: self.pipeline()?,
            stop: self.stop()?,
        })
    }
}

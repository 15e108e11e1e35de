//! Run configuration: a nested key-value (TOML) file with exhaustive
//! validation. Unknown keys are rejected, every field has a documented
//! default, and the snapshot written into a run directory re-parses to an
//! equal configuration.

use serde::{Deserialize, Serialize};

use crate::attacks::AttackTemplate;
use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::models::ModelDims;
use crate::training::ScheduleKind;

/// Every model the reproduction pipeline can train and score.
pub const ALL_MODELS: [&str; 9] = [
    "concat",
    "mean",
    "early",
    "gated",
    "lel",
    "robust",
    "robust-aligned",
    "end2end-at",
    "oracle",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// PGD steps of the training-time inner attack (robust variants only).
    #[serde(default)]
    pub inner_steps: Option<usize>,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleKind,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_batch() -> usize {
    64
}
fn default_schedule() -> ScheduleKind {
    ScheduleKind::Alternating
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Sample budget for the transfer/feature/targeted attack tables; the
    /// adaptive tables always use the full test split.
    #[serde(default = "default_appendix_samples")]
    pub appendix_samples: usize,
    /// Budget of the feature-level attack, in feature units.
    #[serde(default = "default_feature_epsilon")]
    pub feature_epsilon: f64,
}

fn default_appendix_samples() -> usize {
    250
}
fn default_feature_epsilon() -> f64 {
    3.0
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            appendix_samples: default_appendix_samples(),
            feature_epsilon: default_feature_epsilon(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// One pipeline run per seed; metrics are averaged across them.
    pub seeds: Vec<u64>,
    /// Model selection; defaults to the full zoo.
    #[serde(default = "default_models")]
    pub models: Vec<String>,
    pub task: TaskSpec,
    #[serde(default)]
    pub model: ModelDims,
    pub train_clean: TrainSettings,
    pub train_robust: TrainSettings,
    pub attack: AttackTemplate,
    #[serde(default)]
    pub eval: EvalSettings,
}

fn default_models() -> Vec<String> {
    ALL_MODELS.iter().map(|s| s.to_string()).collect()
}

impl RunConfig {
    /// The reference configuration: a 3-modality, 4-class task with high
    /// cross-modality redundancy, scored under 10-step PGD.
    pub fn reference() -> Self {
        RunConfig {
            seeds: vec![0, 1, 2],
            models: default_models(),
            task: TaskSpec {
                modalities: 3,
                classes: 4,
                latent_dim: 8,
                private_dim: 4,
                input_dims: vec![20, 20, 20],
                redundancy: 0.9,
                noise_sigma: 0.1,
                n_train: 4000,
                n_test: 1000,
                seed: 0,
                shared_mixing: false,
            },
            model: ModelDims::default(),
            train_clean: TrainSettings {
                lr: 0.03,
                momentum: 0.9,
                weight_decay: 5e-4,
                epochs: 20,
                batch_size: 64,
                grad_clip: None,
                inner_steps: None,
                schedule: ScheduleKind::Alternating,
            },
            train_robust: TrainSettings {
                lr: 0.03,
                momentum: 0.9,
                weight_decay: 5e-4,
                epochs: 10,
                batch_size: 64,
                grad_clip: Some(20.0),
                inner_steps: Some(10),
                schedule: ScheduleKind::Alternating,
            },
            attack: AttackTemplate::new(0.5, 10),
            eval: EvalSettings::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config encode: {e}")))
    }

    /// SHA-256 over the canonical snapshot text.
    pub fn hash(&self) -> Result<String> {
        Ok(crate::report::sha256_hex(self.to_toml()?.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".to_string()));
        }
        self.task.validate()?;
        if self.models.is_empty() {
            return Err(Error::Config("models must not be empty".to_string()));
        }
        for m in &self.models {
            if !ALL_MODELS.contains(&m.as_str()) {
                return Err(Error::Config(format!(
                    "unknown model `{m}`; choose from {ALL_MODELS:?}"
                )));
            }
        }
        for (name, t) in [("train_clean", &self.train_clean), ("train_robust", &self.train_robust)]
        {
            if t.lr <= 0.0 {
                return Err(Error::Config(format!("{name}.lr must be > 0")));
            }
            if t.batch_size == 0 {
                return Err(Error::Config(format!("{name}.batch_size must be >= 1")));
            }
        }
        if self.attack.epsilon < 0.0 {
            return Err(Error::Config("attack.epsilon must be >= 0".to_string()));
        }
        if self.attack.steps == 0 {
            return Err(Error::Config("attack.steps must be >= 1".to_string()));
        }
        if self.eval.appendix_samples == 0 {
            return Err(Error::Config("eval.appendix_samples must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Does the run train/score this model name?
    pub fn wants(&self, model: &str) -> bool {
        self.models.iter().any(|m| m == model)
    }
}

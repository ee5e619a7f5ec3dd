//! Run configuration files.
//!
//! A config is a JSON object whose `profile` selects a complete set of
//! defaults; every other key is deep-merged over that profile, so a file
//! only needs the values it changes.
//!
//! ```json
//! { "profile": "toy", "seed": 3, "stage1": { "iters_per_epoch": 80 } }
//! ```

use crate::model::ModelConfig;
use crate::policy::Preset;
use crate::train::{Stage, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full-scale optimizer settings on the small model.
    Paper,
    /// Desk-scale settings that train in seconds.
    #[default]
    Toy,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Toy => "toy",
        })
    }
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Profile::Paper),
            "toy" => Ok(Profile::Toy),
            _ => Err(format!("unknown profile `{s}` (expected paper or toy)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    /// Single source of randomness: model init, data and instruction draws.
    pub seed: u64,
    pub preset: Preset,
    pub model: ModelConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    /// Dataset manifest; `None` means the caller supplies one.
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let (stage1, stage2) = match profile {
            Profile::Paper => (TrainConfig::paper(), TrainConfig::paper()),
            Profile::Toy => (TrainConfig::toy_stage1(), TrainConfig::toy_stage2()),
        };
        Self {
            profile,
            seed: 0,
            preset: Preset::ArtGpt4,
            model: ModelConfig::reference_toy(),
            stage1,
            stage2,
            manifest: None,
            out_dir: PathBuf::from("runs"),
        }
    }

    /// Merges `overrides` over the defaults of the profile it names.
    pub fn from_value(overrides: &Value) -> Result<Self, ConfigError> {
        let obj = overrides
            .as_object()
            .ok_or_else(|| ConfigError::Invalid("config must be a JSON object".into()))?;
        let profile = match obj.get("profile") {
            None => Profile::default(),
            Some(Value::String(s)) => s.parse().map_err(ConfigError::Invalid)?,
            Some(v) => return Err(ConfigError::Invalid(format!("profile must be a string, got {v}"))),
        };
        let mut base = serde_json::to_value(Self::profile(profile)).expect("config serializes");
        deep_merge(&mut base, overrides);
        let cfg: Self = serde_json::from_value(base).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let value: Value = serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_value(&value).map_err(|e| match e {
            ConfigError::Invalid(message) => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("model: {e}")))?;
        for (name, t) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            t.validate().map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    /// Train settings of `stage`, with its seed taken from the run seed.
    pub fn train(&self, stage: Stage) -> TrainConfig {
        let base = match stage {
            Stage::Stage1 => &self.stage1,
            Stage::Stage2 => &self.stage2,
        };
        TrainConfig {
            seed: self.seed,
            ..base.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Recursively overwrites `base` with `over`; objects merge key by key,
/// anything else replaces.
pub fn deep_merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn profile_defaults() {
        let c = RunConfig::from_value(&json!({"profile": "paper"})).unwrap();
        assert_eq!(c.stage1, TrainConfig::paper());
        let c = RunConfig::from_value(&json!({})).unwrap();
        assert_eq!(c.profile, Profile::Toy);
        assert_eq!(c.stage2, TrainConfig::toy_stage2());
    }

    #[test]
    fn nested_override_keeps_siblings() {
        let c = RunConfig::from_value(&json!({
            "seed": 9,
            "stage1": {"iters_per_epoch": 80},
            "model": {"vision": {"stub_seed": 1}}
        }))
        .unwrap();
        assert_eq!(c.stage1.iters_per_epoch, 80);
        assert_eq!(c.stage1.init_lr, TrainConfig::toy_stage1().init_lr);
        assert_eq!(c.model.vision.stub_seed, 1);
        assert_eq!(c.model.vision.image_side, 16);
        assert_eq!(c.train(Stage::Stage1).seed, 9);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(RunConfig::from_value(&json!({"bogus": 1})).is_err());
        assert!(RunConfig::from_value(&json!({"profile": "huge"})).is_err());
        assert!(RunConfig::from_value(&json!({"model": {"hidden": 6}})).is_err());
        assert!(RunConfig::from_value(&json!({"stage1": {"batch_size": 0}})).is_err());
    }

    #[test]
    fn round_trips() {
        let c = RunConfig::profile(Profile::Toy);
        let back = RunConfig::from_value(&serde_json::from_str(&c.to_json()).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}

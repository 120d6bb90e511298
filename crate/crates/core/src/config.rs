//! The run configuration: one JSON file plus dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::diffusion::{ArtifactStamp, ModelConfig, ScheduleConfig};
use crate::evaluation::TestSetConfig;
use crate::pipeline::PipelineConfig;
use crate::trainer::{IterationConfig, PretrainConfig, TrainConfig};
use crate::world::WorldConfig;

pub const CONFIG_SCHEMA: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("missing config file {0}")]
    MissingFile(PathBuf),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config schema version {found}, expected {expected}")]
    Schema { found: u32, expected: u32 },
    #[error("bad override {0:?}")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub world: WorldConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub pipeline: PipelineConfig,
    /// Supervised stage run before the preference stage; `null` skips it.
    pub sft: Option<TrainConfig>,
    pub dpo: TrainConfig,
    pub testset: TestSetConfig,
    pub samples_per_case: usize,
    pub rounds: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let it = IterationConfig::default();
        Self {
            schema_version: CONFIG_SCHEMA,
            seed: it.seed,
            world: it.world,
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            pipeline: it.pipeline,
            sft: it.sft,
            dpo: it.preference,
            testset: it.testset,
            samples_per_case: it.samples_per_case,
            rounds: it.rounds,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Sets `path` (dot separated) inside `root` to `value`. Every segment must
/// already exist, so typos fail loudly instead of being ignored.
pub fn apply_override(root: &mut Value, path: &str, value: Value) -> Result<(), ConfigError> {
    let bad = || ConfigError::Override(path.to_string());
    let mut node = root;
    for key in path.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(key).ok_or_else(bad)?,
            Value::Array(items) => {
                let i: usize = key.parse().map_err(|_| bad())?;
                items.get_mut(i).ok_or_else(bad)?
            }
            _ => return Err(bad()),
        };
    }
    *node = value;
    Ok(())
}

/// Splits `key=value`. The value is read as JSON when it parses, as a plain
/// string otherwise.
pub fn parse_override(spec: &str) -> Result<(String, Value), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::Override(spec.to_string()));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

impl RunConfig {
    pub fn from_value(value: Value) -> Result<Self, ConfigError> {
        let found = value.get("schema_version").and_then(Value::as_u64).unwrap_or(CONFIG_SCHEMA as u64) as u32;
        if found != CONFIG_SCHEMA {
            return Err(ConfigError::Schema {
                found,
                expected: CONFIG_SCHEMA,
            });
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then the file (if any), then the overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| {
                    if source.kind() == std::io::ErrorKind::NotFound {
                        ConfigError::MissingFile(p.to_path_buf())
                    } else {
                        ConfigError::Io {
                            path: p.to_path_buf(),
                            source,
                        }
                    }
                })?;
                let file: Value = serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
                // Round trip through the struct so every default is present
                // before overrides are resolved against it.
                serde_json::to_value(Self::from_value(file)?).expect("config serializes")
            }
            None => serde_json::to_value(Self::default()).expect("config serializes"),
        };
        for spec in overrides {
            let (key, v) = parse_override(spec)?;
            apply_override(&mut value, &key, v)?;
        }
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.pipeline.validate().map_err(|e| invalid(&e))?;
        self.dpo.validate().map_err(|e| invalid(&e))?;
        if let Some(sft) = &self.sft {
            sft.validate().map_err(|e| invalid(&e))?;
        }
        if self.samples_per_case == 0 {
            return Err(ConfigError::Invalid("samples_per_case must be at least 1".into()));
        }
        if self.testset.n_cases == 0 {
            return Err(ConfigError::Invalid("testset.n_cases must be at least 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the serialized config without `out_dir`, so moving a run
    /// does not change its identity.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut v {
            map.remove("out_dir");
        }
        hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("config serializes")))
    }

    pub fn stamp(&self) -> ArtifactStamp {
        ArtifactStamp::new(self.hash(), self.seed)
    }

    pub fn iteration(&self) -> IterationConfig {
        IterationConfig {
            rounds: self.rounds,
            seed: self.seed,
            world: self.world.clone(),
            pipeline: self.pipeline.clone(),
            sft: self.sft.clone(),
            preference: self.dpo.clone(),
            testset: self.testset,
            samples_per_case: self.samples_per_case,
        }
    }
}

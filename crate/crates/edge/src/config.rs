//! The run configuration file: TOML with explicit sections, defaults for
//! everything, and unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LengthCaps;
use crate::model::ModelConfig;
use crate::text::EmbeddingSource;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub max_size: usize,
    pub min_freq: usize,
    pub lowercase: bool,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            max_size: 50_000,
            min_freq: 2,
            lowercase: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// `"random"` or a path to a token-per-line vector file.
    pub source: String,
    pub trainable: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            source: "random".into(),
            trainable: false,
        }
    }
}

impl EmbeddingConfig {
    pub fn parsed_source(&self) -> EmbeddingSource {
        if self.source == "random" {
            EmbeddingSource::Random
        } else {
            EmbeddingSource::File(PathBuf::from(&self.source))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub max_len: usize,
    pub length_normalize: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            max_len: 15,
            length_normalize: false,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub vocab: VocabConfig,
    pub embeddings: EmbeddingConfig,
    pub limits: LengthCaps,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(ConfigError::Invalid)?;
        if self.model.dim == 0 || !self.model.dim.is_multiple_of(2) {
            return Err(ConfigError::Invalid(format!(
                "model.dim must be a positive even number, got {}",
                self.model.dim
            )));
        }
        if self.vocab.max_size < 4 {
            return Err(ConfigError::Invalid(
                "vocab.max_size must leave room for at least one token beyond the specials".into(),
            ));
        }
        if self.inference.max_len == 0 {
            return Err(ConfigError::Invalid("inference.max_len must be positive".into()));
        }
        for cap in [
            self.limits.passage,
            self.limits.question,
            self.limits.answer,
            self.limits.distractor,
        ] {
            if cap == 0 {
                return Err(ConfigError::Invalid("length caps must be positive".into()));
            }
        }
        Ok(())
    }
}

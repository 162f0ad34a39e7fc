//! Pipeline configuration file. Precedence: built-in defaults, then the
//! file, then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::refmodel::{TokenizerMode, TrainConfig};
use crate::schema::ColumnMap;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config value for {key}: {message}")]
    Value { key: &'static str, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub offline: bool,
    pub jobs: usize,
    pub columns: ColumnMap,
    pub lexicon: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub categories: Option<PathBuf>,
    pub grouping: Option<PathBuf>,
    /// Normalization scale.
    #[serde(rename = "L")]
    pub scale: u32,
    /// Normalization threshold.
    pub b: u32,
    pub display_scale: f64,
    pub threshold_hi: f64,
    pub top_k: usize,
    pub target_ratio: Option<f64>,
    pub temperature: f64,
    pub endpoint: Option<String>,
    pub model: String,
    pub tokenizer: TokenizerMode,
    pub train: PipelineTrain,
}

/// Reference-model training settings. Same fields as [`TrainConfig`] but a
/// wider default window: narratives run to a few hundred tokens, and a
/// 16-token window would only ever see (and explain) their last sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineTrain {
    pub lr: f64,
    pub epochs: usize,
    pub position_smoothing: f64,
    pub dim: usize,
    pub window: usize,
}

impl Default for PipelineTrain {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            epochs: t.epochs,
            position_smoothing: t.position_smoothing,
            dim: t.dim,
            window: 512,
        }
    }
}

impl PipelineTrain {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            seed,
            position_smoothing: self.position_smoothing,
            dim: self.dim,
            window: self.window,
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            offline: false,
            jobs: 1,
            columns: ColumnMap::default(),
            lexicon: None,
            templates: None,
            categories: None,
            grouping: None,
            scale: 100,
            b: 1,
            display_scale: 5.0,
            threshold_hi: 3.0,
            top_k: 5,
            target_ratio: None,
            temperature: 0.1,
            endpoint: None,
            model: "llama3-8b".into(),
            tokenizer: TokenizerMode::Word,
            train: PipelineTrain::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key, message: &str| {
            Err(ConfigError::Value {
                key,
                message: message.into(),
            })
        };
        if self.scale == 0 {
            return bad("L", "must be positive");
        }
        if self.jobs == 0 {
            return bad("jobs", "must be positive");
        }
        if self.top_k == 0 {
            return bad("top_k", "must be positive");
        }
        if !(self.display_scale.is_finite() && self.display_scale > 0.0) {
            return bad("display_scale", "must be a positive number");
        }
        if !self.threshold_hi.is_finite() {
            return bad("threshold_hi", "must be finite");
        }
        if let Some(r) = self.target_ratio {
            if !(r.is_finite() && r > 0.0) {
                return bad("target_ratio", "must be a positive number");
            }
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad("temperature", "must lie in [0, 2]");
        }
        if self.train.window == 0 || self.train.dim == 0 {
            return bad("train", "dim and window must be positive");
        }
        if !(self.train.lr.is_finite() && self.train.lr > 0.0) {
            return bad("train.lr", "must be a positive number");
        }
        let unknown = self.columns.unknown_fields();
        if !unknown.is_empty() {
            return Err(ConfigError::Value {
                key: "columns",
                message: format!("unknown record fields {}", unknown.join(", ")),
            });
        }
        Ok(())
    }
}

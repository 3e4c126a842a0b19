use std::path::Path;

use serde::Deserialize;
use trajformer::config::ModelConfig;
use trajformer::data::SyntheticConfig;
use trajformer::train::{PretextConfig, TrainConfig};

use crate::error::CliError;

/// Eval defaults that a config file may set.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub mode: String,
    pub horizon: usize,
    pub mask_ratio: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            mode: "next_step".into(),
            horizon: 5,
            mask_ratio: trajformer::masking::DEFAULT_MASK_RATIO,
            seed: 0,
            batch_size: 16,
        }
    }
}

/// Contents of a `--config` file; every section is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
    pub pretext: PretextConfig,
    pub eval: EvalSettings,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

/// Replaces `target` when the flag was given.
pub fn set<T>(target: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *target = v;
    }
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stformer_core::model::ModelConfig;
use stformer_core::train::TrainOptions;

use crate::error::{CliError, Result};

/// Everything a training or evaluation run reads, as one TOML document.
///
/// ```toml
/// data_path = "data/synthetic"
/// out_dir = "runs/quickstart"
/// seed = 7
///
/// [model]
/// nodes = 8
/// variant = "nystrom"
///
/// [train]
/// epochs = 5
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data_path: PathBuf,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainOptions,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_owned(),
            msg: e.to_string(),
        })?;
        Self::parse(&text, path)
    }

    /// `origin` only labels error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let bad = |msg: String| CliError::Config {
            path: origin.to_owned(),
            msg,
        };
        let cfg: RunConfig = toml::from_str(text).map_err(|e| bad(e.message().to_owned()))?;
        cfg.model.validate().map_err(|e| bad(e.to_string()))?;
        cfg.train.validate().map_err(|e| bad(e.to_string()))?;
        Ok(cfg)
    }

    /// Training options with the run seed applied.
    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }
}

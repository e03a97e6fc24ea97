//! The JSON run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::DatasetSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::strategy::StrategyConfig;
use crate::trainer::{hex, TrainConfig};

pub const OUT_ENV: &str = "RUBI_BENCH_OUT";

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub strategy: StrategyConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Defaults everywhere, with both seeds set to `seed`.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            dataset: DatasetSpec::with_seed(seed),
            model: ModelConfig::default(),
            train: TrainConfig::with_seed(seed),
            strategy: StrategyConfig::default(),
            output_dir: default_output_dir(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies the output-directory override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = std::env::var_os(OUT_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    /// SHA-256 over the canonical JSON of everything except `output_dir`.
    pub fn digest(&self) -> [u8; 32] {
        let v = serde_json::json!({
            "dataset": self.dataset,
            "model": self.model,
            "train": self.train,
            "strategy": self.strategy,
        });
        sha256_json(&v)
    }

    pub fn dataset_digest(&self) -> [u8; 32] {
        sha256_json(&serde_json::json!(self.dataset))
    }

    /// Directory name of this run: a digest prefix plus the training seed.
    pub fn run_id(&self) -> String {
        format!("{}-s{}", &hex(&self.digest())[..16], self.train.seed)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join("runs").join(self.run_id())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir
            .join("data")
            .join(&hex(&self.dataset_digest())[..16])
    }

    /// The same configuration with the training seed advanced by `k`.
    pub fn reseeded(&self, k: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = self.train.seed.wrapping_add(k);
        c
    }
}

/// `serde_json::Value` objects keep keys sorted, so this is canonical.
fn sha256_json(v: &serde_json::Value) -> [u8; 32] {
    Sha256::digest(v.to_string().as_bytes()).into()
}

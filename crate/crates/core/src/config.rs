//! Run configuration: one strict JSON document describing a reproducible run.
//!
//! Unknown keys are rejected. A run is reproducible from the config plus a
//! checkpoint; every seed either appears explicitly or derives from the run
//! seed via fixed offsets (dataset = seed+1, stream = seed+2, pretrain
//! init/shuffle = seed+3).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::{AdaptConfig, PretrainConfig};
use crate::data::{CorruptionKind, CorruptionSpec, ProtocolKind, StreamProtocol};
use crate::error::{DctError, DctResult};
use crate::model::ModelConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    #[serde(default)]
    pub dataset_seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub protocol: ProtocolKind,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub corruption: CorruptionKind,
    #[serde(default = "default_severity")]
    pub severity: u8,
    #[serde(default)]
    pub stream_seed: Option<u64>,
    /// Dirichlet concentration for the imbalanced protocol.
    #[serde(default = "default_concentration")]
    pub concentration: f64,
}

fn default_batch_size() -> usize {
    64
}

fn default_severity() -> u8 {
    5
}

fn default_concentration() -> f64 {
    0.3
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub out_dir: PathBuf,
    /// Base seed for derived per-concern seeds.
    #[serde(default)]
    pub seed: Option<u64>,
    pub model: ModelConfig,
    #[serde(default)]
    pub adapt: AdaptConfig,
    pub data: DataConfig,
    pub stream: StreamConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> DctResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| DctError::Config { message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> DctResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DctError::Config {
            message: format!("cannot read config {}: {e}", path.display()),
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> DctResult<()> {
        self.model.validate()?;
        self.adapt.validate()?;
        if self.run_id.is_empty() {
            return Err(DctError::Config { message: "run_id must not be empty".into() });
        }
        if self.data.classes != self.model.num_classes {
            return Err(DctError::Config {
                message: format!(
                    "data.classes {} does not match model.num_classes {}",
                    self.data.classes, self.model.num_classes
                ),
            });
        }
        if self.data.image_size != self.model.image_size {
            return Err(DctError::Config {
                message: format!(
                    "data.image_size {} does not match model.image_size {}",
                    self.data.image_size, self.model.image_size
                ),
            });
        }
        if self.data.train_per_class == 0 || self.data.test_per_class == 0 {
            return Err(DctError::Config {
                message: "per-class sample counts must be positive".into(),
            });
        }
        if self.stream.severity > 5 {
            return Err(DctError::InvalidSeverity { severity: self.stream.severity });
        }
        if self.stream.batch_size == 0 {
            return Err(DctError::Config { message: "stream.batch_size must be positive".into() });
        }
        if self.stream.protocol == ProtocolKind::Imbalanced && !(self.stream.concentration > 0.0) {
            return Err(DctError::InvalidConcentration { value: self.stream.concentration });
        }
        if self.pretrain.epochs == 0 {
            return Err(DctError::Config { message: "pretrain.epochs must be positive".into() });
        }
        Ok(())
    }

    /// Base seed: explicit `seed` field or 0.
    pub fn run_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn dataset_seed(&self) -> u64 {
        self.data.dataset_seed.unwrap_or_else(|| self.run_seed() + 1)
    }

    pub fn stream_seed(&self) -> u64 {
        self.stream.stream_seed.unwrap_or_else(|| self.run_seed() + 2)
    }

    pub fn pretrain_seed(&self) -> u64 {
        self.pretrain.seed.unwrap_or_else(|| self.run_seed() + 3)
    }

    pub fn corruption_spec(&self) -> DctResult<CorruptionSpec> {
        CorruptionSpec::new(self.stream.corruption, self.stream.severity)
    }

    pub fn stream_protocol(&self) -> StreamProtocol {
        StreamProtocol {
            kind: self.stream.protocol,
            batch_size: self.stream.batch_size,
            concentration: self.stream.concentration,
            seed: self.stream_seed(),
        }
    }

    pub fn out_path(&self, suffix: &str) -> PathBuf {
        self.out_dir.join(format!("{}.{suffix}", self.run_id))
    }
}

//! Pipeline configuration: one TOML file shared by every CLI stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::merge::SyntheticConfig;
use crate::partition::PartitionConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {0}: {1}")]
    Unreadable(PathBuf, std::io::Error),
    #[error("cannot parse config {0}: {1}")]
    Malformed(PathBuf, toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Directory holding the sparse reconstruction (text or binary layout).
    pub sparse_dir: PathBuf,
    /// Directory holding the per-view images named in the model.
    pub images_dir: PathBuf,
    /// Optional directory of monocular depth priors (`<stem>.pfm` or 16-bit
    /// `<stem>.png` with a JSON scale sidecar).
    pub depth_dir: Option<PathBuf>,
    /// All stage artifacts land under this directory.
    pub output_dir: PathBuf,
    /// Every k-th view (by ascending id order) is held out for evaluation.
    pub eval_every_kth: usize,
    pub parallel_workers: usize,
    pub partition: PartitionConfig,
    pub train: TrainConfig,
    pub synth: SyntheticConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sparse_dir: PathBuf::from("sparse"),
            images_dir: PathBuf::from("images"),
            depth_dir: None,
            output_dir: PathBuf::from("output"),
            eval_every_kth: 8,
            parallel_workers: 1,
            partition: PartitionConfig::default(),
            train: TrainConfig::default(),
            synth: SyntheticConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.parallel_workers < 1 {
            return Err(ConfigError::Invalid("parallel_workers must be >= 1".into()));
        }
        if self.eval_every_kth < 2 {
            return Err(ConfigError::Invalid("eval_every_kth must be >= 2".into()));
        }
        if self.train.iterations == 0 || self.train.batch_size == 0 {
            return Err(ConfigError::Invalid("train.iterations and train.batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn blockplan_path(&self) -> PathBuf {
        self.output_dir.join("blockplan.json")
    }

    pub fn block_dir(&self, block_id: u32) -> PathBuf {
        self.output_dir.join(format!("block_{block_id}"))
    }

    pub fn scene_ply_path(&self) -> PathBuf {
        self.output_dir.join("scene").join("point_cloud.ply")
    }

    pub fn eval_report_path(&self) -> PathBuf {
        self.output_dir.join("eval_report.json")
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Unreadable(path.to_path_buf(), e))?;
    let cfg: PipelineConfig =
        toml::from_str(&text).map_err(|e| ConfigError::Malformed(path.to_path_buf(), e))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(cfg: &PipelineConfig, path: &Path) -> Result<(), ConfigError> {
    let text = toml::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(path, text).map_err(|e| ConfigError::Unreadable(path.to_path_buf(), e))
}

/// Splits sorted view ids into (training, evaluation) sets: every k-th view
/// (indices 0, k, 2k, ...) is held out.
pub fn split_views(sorted_ids: &[u32], every_kth: usize) -> (Vec<u32>, Vec<u32>) {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (i, &id) in sorted_ids.iter().enumerate() {
        if i % every_kth == 0 {
            eval.push(id);
        } else {
            train.push(id);
        }
    }
    (train, eval)
}

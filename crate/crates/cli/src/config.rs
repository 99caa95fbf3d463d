//! Layered configuration: TOML file, environment, command-line flags.
//!
//! Precedence is flag > `COUNTLAB_DATA_ROOT` (data root only) > file >
//! default. The fully resolved configuration is persisted next to training
//! outputs so every run can be reproduced from its artifacts.

use std::path::{Path, PathBuf};

use countlab::dcgp::InferConfig;
use countlab::models::EncoderConfig;
use countlab::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DATA_ROOT_ENV: &str = "COUNTLAB_DATA_ROOT";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub infer: InferSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub root: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub input_size: u32,
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let cfg = EncoderConfig::default();
        Self {
            input_size: cfg.input_size,
            widths: cfg.widths,
            seed: cfg.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda_weight: f64,
    pub lambda_bb: f64,
    pub freeze_encoder: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let cfg = TrainConfig::default();
        Self {
            lr: cfg.lr,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            lambda_weight: cfg.lambda_weight,
            lambda_bb: cfg.lambda_bb,
            freeze_encoder: cfg.freeze_encoder,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    pub m: usize,
    pub tau: f64,
    pub hybrid: bool,
}

impl Default for InferSection {
    fn default() -> Self {
        let cfg = InferConfig::default();
        Self {
            m: cfg.m,
            tau: cfg.tau,
            hybrid: cfg.hybrid,
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            // toml errors already carry line/column spans.
            message: e.to_string(),
        })
    }
}

/// Everything the commands need, after layering.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Resolved {
    pub data_root: PathBuf,
    pub model: EncoderConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
}

pub fn resolve(
    config_path: Option<&Path>,
    root_flag: Option<&Path>,
) -> Result<Resolved, CliError> {
    let file = match config_path {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let data_root = root_flag
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .or(file.data.root)
        .unwrap_or_else(|| PathBuf::from("data"));
    Ok(Resolved {
        data_root,
        model: EncoderConfig {
            input_size: file.model.input_size,
            widths: file.model.widths,
            seed: file.model.seed,
        },
        train: TrainConfig {
            lr: file.train.lr,
            epochs: file.train.epochs,
            batch_size: file.train.batch_size,
            seed: file.train.seed,
            lambda_weight: file.train.lambda_weight,
            lambda_bb: file.train.lambda_bb,
            freeze_encoder: file.train.freeze_encoder,
        },
        infer: InferConfig {
            m: file.infer.m,
            tau: file.infer.tau,
            hybrid: file.infer.hybrid,
        },
    })
}

impl Resolved {
    /// Persist the effective configuration for provenance.
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let body = serde_json::to_vec_pretty(self).expect("config serializes");
        std::fs::write(path, body).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

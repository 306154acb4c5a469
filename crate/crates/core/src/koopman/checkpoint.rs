//! JSON checkpoints. Floats are written in shortest round-trip form, so a
//! save/load cycle reproduces every parameter bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Dense, KoopmanModel, TrainConfig, INPUT_DIM};
use crate::datagen::NormStats;
use crate::linalg::{LinalgError, Matrix};

pub const CHECKPOINT_SCHEMA: &str = "mdk-koopman/1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint schema `{0}`")]
    Schema(String),
    #[error("inconsistent checkpoint: {0}")]
    Shape(#[from] LinalgError),
}

/// Provenance and settings echoed into the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub train: TrainConfig,
    pub dataset_seed: u64,
    pub plant_config_hash: String,
    /// Input channels that were z-scored before training.
    pub normalized_inputs: Vec<String>,
    /// Episodes held out for testing; evaluation refuses anything else.
    pub test_episodes: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerJson {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    pub config: CheckpointConfig,
    pub norm_stats: NormStats,
    pub encoder: Vec<LayerJson>,
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    #[serde(rename = "B")]
    pub b: Vec<f64>,
    pub seed: u64,
    pub iteration: usize,
    pub test_loss: f64,
}

impl Checkpoint {
    pub fn new(model: &KoopmanModel, config: CheckpointConfig, seed: u64, iteration: usize, test_loss: f64) -> Self {
        Self {
            schema: CHECKPOINT_SCHEMA.to_string(),
            config,
            norm_stats: model.norm.clone(),
            encoder: model
                .layers
                .iter()
                .map(|l| LayerJson { rows: l.w.rows(), cols: l.w.cols(), w: l.w.as_slice().to_vec(), b: l.b.as_slice().to_vec() })
                .collect(),
            a: model.a.as_slice().to_vec(),
            b: model.b.as_slice().to_vec(),
            seed,
            iteration,
            test_loss,
        }
    }

    pub fn model(&self) -> Result<KoopmanModel, CheckpointError> {
        let enc = self.config.train.encoder.clone();
        let dims = enc.layer_dims();
        if dims.len() != self.encoder.len() {
            return Err(LinalgError::BadLength { rows: dims.len(), cols: 1, len: self.encoder.len() }.into());
        }
        let mut layers = Vec::with_capacity(dims.len());
        for ((fan_in, fan_out), l) in dims.into_iter().zip(&self.encoder) {
            if (l.rows, l.cols) != (fan_in, fan_out) {
                return Err(LinalgError::DimensionMismatch { op: "checkpoint layer", left: (fan_in, fan_out), right: (l.rows, l.cols) }.into());
            }
            layers.push(Dense { w: Matrix::from_vec(l.rows, l.cols, l.w.clone())?, b: Matrix::from_vec(1, l.cols, l.b.clone())? });
        }
        let n = enc.observable_dim();
        Ok(KoopmanModel {
            config: enc,
            layers,
            a: Matrix::from_vec(n, n, self.a.clone())?,
            b: Matrix::from_vec(n, INPUT_DIM, self.b.clone())?,
            norm: self.norm_stats.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String, CheckpointError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.schema != CHECKPOINT_SCHEMA {
            return Err(CheckpointError::Schema(ck.schema));
        }
        ck.model()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json()?).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }
}

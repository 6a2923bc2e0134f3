//! Training, serving and persistence of the moisture models.
//!
//! The FFNN estimates moisture from the features of the same tick. The LSTM
//! reads the `L` rows before a tick and predicts that tick's moisture. Online
//! forecasts for the next tick combine the FFNN applied to the latest row
//! with the LSTM applied to the latest `L` rows.

mod config;
mod predict;
mod registry;
mod train;

pub use config::{FfnnConfig, LstmConfig, TrainConfig};
pub use predict::{evaluate, forecast_horizon, persistence, predict_point, Evaluation, ModelKind, Residual};
pub use registry::{ModelInfo, Registry};
pub use train::{train, EpochStats, TestMetrics, TrainOutcome, TrainingHistory};

use serde::{Deserialize, Serialize};

use crate::features::{FeatureError, NormStats};
use crate::neural::model_file::ModelFileError;
use crate::neural::NeuralError;
use crate::time::{Duration, Timestamp};
use crate::{Ffnn, LstmNet};

#[derive(Debug, thiserror::Error)]
pub enum ForecastError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    ModelFile(#[from] ModelFileError),
    #[error("insufficient history: need {need} contiguous rows, have {got}")]
    InsufficientHistory { need: usize, got: usize },
    #[error("normalization stats mismatch: model expects {expected}, got {got}")]
    StatsMismatch { expected: String, got: String },
    #[error("rows must be strictly increasing in time")]
    Unordered,
    #[error("no model published")]
    NoModel,
    #[error("model registry: {0}")]
    Registry(String),
}

impl From<std::io::Error> for ForecastError {
    fn from(e: std::io::Error) -> Self {
        ForecastError::Registry(e.to_string())
    }
}

/// An immutable, servable model pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModels {
    /// Registry version, empty until published.
    pub version: String,
    pub ffnn: Ffnn,
    pub lstm: LstmNet,
    pub norm: NormStats,
    pub lookback: usize,
    pub cadence: Duration,
    pub ensemble_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    pub timestamp: Timestamp,
    pub ffnn_pred: f64,
    pub lstm_pred: f64,
    pub ensemble: f64,
    pub model_version: String,
    /// The newest input row is more than two cadences older than `now`.
    #[serde(default)]
    pub stale: bool,
}

pub fn ensemble(w: f64, ffnn_pred: f64, lstm_pred: f64) -> f64 {
    w * ffnn_pred + (1.0 - w) * lstm_pred
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ensemble_weights() {
        assert_eq!(ensemble(0.5, 2.0, 3.0), 2.5);
        assert_eq!(ensemble(1.0, 2.0, 3.0), 2.0);
        assert_eq!(ensemble(0.0, 2.0, 3.0), 3.0);
    }
}

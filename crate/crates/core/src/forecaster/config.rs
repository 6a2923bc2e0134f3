use serde::{Deserialize, Serialize};

use crate::features::SplitSpec;
use crate::neural::Activation;
use crate::time::Duration;

use super::ForecastError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FfnnConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for FfnnConfig {
    fn default() -> Self {
        FfnnConfig {
            hidden: vec![128, 64],
            activation: Activation::Elu,
            epochs: 500,
            batch_size: 32,
            learning_rate: 1e-4,
        }
    }
}

/// LSTM(units) → Dense(dense_units) → Dense(1). The cell uses tanh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmConfig {
    pub units: usize,
    pub dense_units: usize,
    pub dense_activation: Activation,
    pub lookback: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig {
            units: 12,
            dense_units: 20,
            dense_activation: Activation::Elu,
            lookback: 6,
            epochs: 500,
            batch_size: 32,
            learning_rate: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub ffnn: FfnnConfig,
    pub lstm: LstmConfig,
    pub split: SplitSpec,
    pub seed: u64,
    pub cadence_mins: i64,
    /// Weight of the FFNN in the ensemble; the LSTM gets `1 - w`.
    pub ensemble_weight: f64,
    /// Keep the parameters from the epoch with the lowest validation loss.
    pub checkpoint_best_val: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ffnn: FfnnConfig::default(),
            lstm: LstmConfig::default(),
            split: SplitSpec::default(),
            seed: 1,
            cadence_mins: 10,
            ensemble_weight: 0.5,
            checkpoint_best_val: false,
        }
    }
}

impl TrainConfig {
    pub fn cadence(&self) -> Duration {
        Duration::from_mins(self.cadence_mins)
    }

    /// Same epochs for both models.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.ffnn.epochs = epochs;
        self.lstm.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<(), ForecastError> {
        let bad = |m: String| Err(ForecastError::InvalidConfig(m));
        self.split.validate()?;
        if self.ffnn.hidden.iter().any(|&h| h == 0) {
            return bad("hidden layer sizes must be positive".into());
        }
        if self.lstm.units == 0 || self.lstm.dense_units == 0 || self.lstm.lookback == 0 {
            return bad("lstm units, dense units and lookback must be positive".into());
        }
        for (name, epochs, batch, lr) in [
            ("ffnn", self.ffnn.epochs, self.ffnn.batch_size, self.ffnn.learning_rate),
            ("lstm", self.lstm.epochs, self.lstm.batch_size, self.lstm.learning_rate),
        ] {
            if epochs == 0 || batch == 0 {
                return bad(format!("{name}: epochs and batch size must be at least 1"));
            }
            if !(lr.is_finite() && lr >= 0.0) {
                return bad(format!("{name}: learning rate must be finite and >= 0"));
            }
        }
        if self.cadence_mins <= 0 {
            return bad("cadence must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ensemble_weight) {
            return bad(format!("ensemble weight {} outside [0, 1]", self.ensemble_weight));
        }
        Ok(())
    }
}

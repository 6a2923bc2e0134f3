//! Serving side of the forecaster: the published model snapshot and
//! forecasts computed from the store.

use std::sync::{Arc, Mutex, RwLock};

use wallet_core::forecaster::{forecast_horizon, predict_point, ForecastError, ForecastModels, ForecastResult, Registry};
use wallet_core::reading::SOIL_MOISTURE;
use wallet_core::Timestamp;
use wallet_store::{SeriesKey, Store};

use crate::config::DatasetConfig;
use crate::dataset::{recent_rows, DatasetError};

/// The model readers use. Publication swaps the whole `Arc`, so a reader
/// holds either the old model or the new one, never a mix.
#[derive(Default)]
pub struct ModelSlot {
    current: RwLock<Option<Arc<ForecastModels>>>,
}

impl ModelSlot {
    pub fn get(&self) -> Option<Arc<ForecastModels>> {
        self.current.read().expect("model slot poisoned").clone()
    }

    pub fn set(&self, models: ForecastModels) {
        *self.current.write().expect("model slot poisoned") = Some(Arc::new(models));
    }

    /// Loads the registry's current version if there is one.
    pub fn load_current(&self, registry: &Registry) -> Result<bool, ForecastError> {
        match registry.load_current() {
            Ok(m) => {
                log::info!("serving model {}", m.version);
                self.set(m);
                Ok(true)
            }
            Err(ForecastError::NoModel) => Ok(false),
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// `steps` forecasts from the newest stored rows of the dataset.
pub fn forecast_from_store(
    store: &Store,
    dataset: &DatasetConfig,
    models: &ForecastModels,
    steps: usize,
    now: Option<Timestamp>,
) -> Result<Vec<ForecastResult>, ServeError> {
    let key = SeriesKey::new(dataset.soil_device.as_str(), SOIL_MOISTURE).map_err(DatasetError::from)?;
    let need = models.lookback + 1;
    let Some(latest) = store.latest(&key).map_err(DatasetError::from)? else {
        return Err(ForecastError::InsufficientHistory { need, got: 0 }.into());
    };
    let rows = recent_rows(store, dataset, models.cadence, latest.timestamp, need + 1)?;
    Ok(forecast_horizon(models, &rows, steps, now)?)
}

/// Recomputes the next-tick forecast as readings arrive.
pub struct OnlineForecaster {
    slot: Arc<ModelSlot>,
    dataset: DatasetConfig,
    /// Model version and newest input tick of the last forecast.
    last: Mutex<Option<(String, Timestamp)>>,
}

impl OnlineForecaster {
    pub fn new(slot: Arc<ModelSlot>, dataset: DatasetConfig) -> OnlineForecaster {
        OnlineForecaster {
            slot,
            dataset,
            last: Mutex::new(None),
        }
    }

    pub fn is_input_device(&self, device_id: &str) -> bool {
        [&self.dataset.soil_device, &self.dataset.weather_device, &self.dataset.pressure_device]
            .iter()
            .any(|d| d.as_str() == device_id)
    }

    /// Device the forecast series is stored under.
    pub fn output_device(&self) -> &str {
        &self.dataset.soil_device
    }

    /// A forecast when a model is published and the newest complete row is
    /// one not forecast from before.
    pub fn refresh(&self, store: &Store) -> Option<ForecastResult> {
        let models = self.slot.get()?;
        let key = SeriesKey::new(self.dataset.soil_device.as_str(), SOIL_MOISTURE).ok()?;
        let latest = store.latest(&key).ok()??;
        let need = models.lookback + 1;
        let rows = match recent_rows(store, &self.dataset, models.cadence, latest.timestamp, need + 1) {
            Ok(r) => r,
            Err(e) => {
                log::debug!("online forecast skipped: {e}");
                return None;
            }
        };
        let newest = rows.last()?.timestamp;
        let mut last = self.last.lock().expect("online forecaster poisoned");
        if last.as_ref().map_or(false, |(v, t)| *v == models.version && *t >= newest) {
            return None;
        }
        match predict_point(&models, &rows, None) {
            Ok(f) => {
                *last = Some((models.version.clone(), newest));
                Some(f)
            }
            Err(e) => {
                log::debug!("online forecast skipped: {e}");
                None
            }
        }
    }
}

//! Feature rows assembled from stored series.

use std::collections::BTreeMap;

use wallet_core::features::{align, FeatureError, FeatureRow};
use wallet_core::reading::{AIR_HUMIDITY, AIR_PRESSURE, AIR_TEMPERATURE, RSSI, SNR, SOIL_MOISTURE};
use wallet_core::{Duration, Timestamp};
use wallet_store::{SeriesKey, Store, StoreError};

use crate::config::DatasetConfig;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Store series feeding each feature and the target.
pub fn sources(cfg: &DatasetConfig) -> Result<Vec<(&'static str, SeriesKey)>, StoreError> {
    Ok(vec![
        (RSSI, SeriesKey::new(cfg.soil_device.as_str(), RSSI)?),
        (SNR, SeriesKey::new(cfg.soil_device.as_str(), SNR)?),
        (AIR_TEMPERATURE, SeriesKey::new(cfg.weather_device.as_str(), AIR_TEMPERATURE)?),
        (AIR_HUMIDITY, SeriesKey::new(cfg.weather_device.as_str(), AIR_HUMIDITY)?),
        (AIR_PRESSURE, SeriesKey::new(cfg.pressure_device.as_str(), AIR_PRESSURE)?),
        (SOIL_MOISTURE, SeriesKey::new(cfg.soil_device.as_str(), SOIL_MOISTURE)?),
    ])
}

/// Aligned rows whose ticks fall in `[from, to)`.
pub fn build_rows(
    store: &Store,
    cfg: &DatasetConfig,
    cadence: Duration,
    from: Timestamp,
    to: Timestamp,
) -> Result<Vec<FeatureRow>, DatasetError> {
    let tol = cfg.tolerance();
    let mut series = BTreeMap::new();
    for (name, key) in sources(cfg)? {
        let points = store.query(&key, from.saturating_sub(tol), to.saturating_add(tol))?;
        series.insert(name.to_owned(), points);
    }
    let rows = align(&series, cadence, tol)?;
    Ok(rows.into_iter().filter(|r| from <= r.timestamp && r.timestamp < to).collect())
}

pub fn all_rows(store: &Store, cfg: &DatasetConfig, cadence: Duration) -> Result<Vec<FeatureRow>, DatasetError> {
    let key = SeriesKey::new(cfg.soil_device.as_str(), SOIL_MOISTURE)?;
    let first = store.query_all(&key)?;
    let (Some(a), Some(b)) = (first.first(), first.last()) else { return Ok(Vec::new()) };
    build_rows(store, cfg, cadence, a.timestamp.saturating_sub(cadence), b.timestamp.saturating_add(cadence))
}

/// The newest `n` rows up to `until`. A reading up to the tolerance before
/// a tick aligns to it, so ticks up to `until + tolerance` count.
pub fn recent_rows(
    store: &Store,
    cfg: &DatasetConfig,
    cadence: Duration,
    until: Timestamp,
    n: usize,
) -> Result<Vec<FeatureRow>, DatasetError> {
    let from = until.saturating_sub(cadence.mul(n as i64 + 1));
    let to = until.saturating_add(cfg.tolerance()).saturating_add(Duration::from_micros(1));
    let mut rows = build_rows(store, cfg, cadence, from, to)?;
    let skip = rows.len().saturating_sub(n);
    rows.drain(..skip);
    Ok(rows)
}

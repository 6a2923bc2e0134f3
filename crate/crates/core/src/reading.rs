//! Readings as stored and evaluated, independent of the wire format.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::time::Timestamp;

pub const SOIL_MOISTURE: &str = "soil_moisture";
pub const AIR_TEMPERATURE: &str = "air_temperature";
pub const AIR_HUMIDITY: &str = "air_humidity";
pub const AIR_PRESSURE: &str = "air_pressure";
pub const RSSI: &str = "rssi";
pub const SNR: &str = "snr";
/// Forecast ensemble output, stored next to the measured series.
pub const SOIL_MOISTURE_PRED: &str = "soil_moisture_pred";

pub const RSSI_RANGE: (f64, f64) = (-200.0, 0.0);
pub const SNR_RANGE: (f64, f64) = (-30.0, 30.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub timestamp: Timestamp,
    pub value: f64,
}

impl SeriesPoint {
    pub fn new(timestamp: Timestamp, value: f64) -> Self {
        SeriesPoint { timestamp, value }
    }
}

/// Radio link quality of the gateway that heard the uplink best.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub rssi: f64,
    pub snr: f64,
}

impl Link {
    pub fn in_range(&self) -> bool {
        (RSSI_RANGE.0..=RSSI_RANGE.1).contains(&self.rssi) && (SNR_RANGE.0..=SNR_RANGE.1).contains(&self.snr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub device_id: String,
    pub timestamp: Timestamp,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<Link>,
}

impl SensorReading {
    /// Metric values plus `rssi`/`snr` from the link, as they are persisted.
    pub fn series(&self) -> Vec<(&str, f64)> {
        let mut out: Vec<(&str, f64)> = self.metrics.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        if let Some(link) = self.link {
            out.push((RSSI, link.rssi));
            out.push((SNR, link.snr));
        }
        out
    }
}

/// `[a-z0-9_]+`
pub fn is_valid_metric(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

/// Device ids become directory names, so they are limited to
/// `[A-Za-z0-9_.-]`, at most 64 bytes, and may not start with a dot.
pub fn is_valid_device_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && !id.starts_with('.')
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
}

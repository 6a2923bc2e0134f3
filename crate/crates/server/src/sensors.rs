//! Registered sensor descriptors.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use wallet_core::reading::{is_valid_device_id, is_valid_metric};
use wallet_core::Timestamp;

use crate::persist;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    pub name: String,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewSensor {
    pub device_id: String,
    pub sensor_type: String,
    pub metrics: Vec<MetricSpec>,
    #[serde(default)]
    pub location: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorDescriptor {
    pub device_id: String,
    pub sensor_type: String,
    pub metrics: Vec<MetricSpec>,
    pub location: String,
    pub registered_by: String,
    pub created_at: Timestamp,
}

#[derive(Debug, thiserror::Error)]
pub enum SensorError {
    #[error("{0}")]
    Invalid(String),
    #[error("device {0} is already registered")]
    Conflict(String),
    #[error("saving sensors: {0}")]
    Storage(String),
}

pub struct SensorBook {
    sensors: RwLock<BTreeMap<String, SensorDescriptor>>,
    path: Option<PathBuf>,
}

impl SensorBook {
    pub fn in_memory() -> SensorBook {
        SensorBook {
            sensors: RwLock::new(BTreeMap::new()),
            path: None,
        }
    }

    pub fn persistent(path: impl Into<PathBuf>) -> anyhow::Result<SensorBook> {
        let path = path.into();
        let list: Vec<SensorDescriptor> = persist::load_json(&path)?.unwrap_or_default();
        Ok(SensorBook {
            sensors: RwLock::new(list.into_iter().map(|s| (s.device_id.clone(), s)).collect()),
            path: Some(path),
        })
    }

    pub fn register(&self, new: NewSensor, by: &str, now: Timestamp) -> Result<SensorDescriptor, SensorError> {
        if !is_valid_device_id(&new.device_id) {
            return Err(SensorError::Invalid("device_id must match [A-Za-z0-9_.-]{1,64}".into()));
        }
        if new.metrics.is_empty() {
            return Err(SensorError::Invalid("metrics must not be empty".into()));
        }
        if let Some(m) = new.metrics.iter().find(|m| !is_valid_metric(&m.name)) {
            return Err(SensorError::Invalid(format!("metric {:?} must match [a-z0-9_]+", m.name)));
        }
        let mut map = self.sensors.write().expect("sensor book poisoned");
        if map.contains_key(&new.device_id) {
            return Err(SensorError::Conflict(new.device_id));
        }
        let d = SensorDescriptor {
            device_id: new.device_id,
            sensor_type: new.sensor_type,
            metrics: new.metrics,
            location: new.location,
            registered_by: by.to_owned(),
            created_at: now,
        };
        map.insert(d.device_id.clone(), d.clone());
        if let Some(path) = &self.path {
            let list: Vec<&SensorDescriptor> = map.values().collect();
            persist::save_json(path, &list).map_err(|e| SensorError::Storage(e.to_string()))?;
        }
        Ok(d)
    }

    pub fn get(&self, device_id: &str) -> Option<SensorDescriptor> {
        self.sensors.read().expect("sensor book poisoned").get(device_id).cloned()
    }

    pub fn is_registered(&self, device_id: &str) -> bool {
        self.sensors.read().expect("sensor book poisoned").contains_key(device_id)
    }

    pub fn list(&self) -> Vec<SensorDescriptor> {
        self.sensors.read().expect("sensor book poisoned").values().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn soil() -> NewSensor {
        NewSensor {
            device_id: "soil-01".into(),
            sensor_type: "capacitive probe".into(),
            metrics: vec![MetricSpec {
                name: "soil_moisture".into(),
                unit: "counts".into(),
            }],
            location: "plot A".into(),
        }
    }

    #[test]
    fn register_persists_and_rejects_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sensors.json");
        let book = SensorBook::persistent(&path).unwrap();
        book.register(soil(), "admin", Timestamp::from_secs(1)).unwrap();
        assert!(matches!(book.register(soil(), "admin", Timestamp::from_secs(2)), Err(SensorError::Conflict(_))));
        let again = SensorBook::persistent(&path).unwrap();
        assert_eq!(again.get("soil-01").unwrap().registered_by, "admin");
        let empty = NewSensor { metrics: vec![], device_id: "x".into(), ..soil() };
        assert!(matches!(again.register(empty, "admin", Timestamp::from_secs(3)), Err(SensorError::Invalid(_))));
    }
}

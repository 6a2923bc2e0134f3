//! Service configuration, read from one JSON file.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use wallet_core::forecaster::TrainConfig;
use wallet_core::Duration;

use crate::auth::UserConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Store, model registry and state files live here.
    pub data_dir: PathBuf,
    pub http_bind: String,
    /// Static dashboard bundle served under `/ui/`.
    pub ui_dir: PathBuf,
    pub ingest: IngestConfig,
    pub sinks: Vec<SinkConfig>,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub downlink: DownlinkConfig,
    pub store_fsync: bool,
    pub users: Vec<UserConfig>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            data_dir: PathBuf::from("data"),
            http_bind: "127.0.0.1:8080".into(),
            ui_dir: PathBuf::from("ui"),
            ingest: IngestConfig::default(),
            sinks: vec![SinkConfig::Log],
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            downlink: DownlinkConfig::default(),
            store_fsync: false,
            users: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// NDJSON line listener; `None` disables it.
    pub tcp_port: Option<u16>,
    pub tcp_host: String,
    pub mqtt: Option<MqttConfig>,
    /// NDJSON files replayed once at startup.
    pub replay: Vec<PathBuf>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            tcp_port: Some(7600),
            tcp_host: "127.0.0.1".into(),
            mqtt: None,
            replay: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MqttConfig {
    /// `mqtt://host:port`
    pub url: String,
    #[serde(default = "default_topic")]
    pub topic: String,
}

pub fn default_topic() -> String {
    "+/devices/+/up".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum SinkConfig {
    Log,
    Webhook {
        #[serde(default = "default_webhook_name")]
        name: String,
        url: String,
    },
}

fn default_webhook_name() -> String {
    "webhook".into()
}

/// Which stored series make up the model's feature rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Reports soil_moisture and carries the rssi/snr link metrics.
    pub soil_device: String,
    /// Reports air_temperature and air_humidity.
    pub weather_device: String,
    /// Holds the imported air_pressure series.
    pub pressure_device: String,
    /// Largest distance from a grid tick to the point used for it.
    pub tolerance_mins: i64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            soil_device: "soil-01".into(),
            weather_device: "weather-01".into(),
            pressure_device: "weather-01".into(),
            tolerance_mins: 5,
        }
    }
}

impl DatasetConfig {
    pub fn tolerance(&self) -> Duration {
        Duration::from_mins(self.tolerance_mins)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    /// In-process queue polled by simulated devices.
    Sim,
    /// TTN-style publish to `{app_id}/devices/{dev_id}/down`.
    Mqtt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownlinkConfig {
    pub transport: TransportKind,
    pub app_id: String,
    /// Broker for the MQTT transport; defaults to the ingest broker.
    pub mqtt_url: Option<String>,
    pub worker_interval_ms: u64,
}

impl Default for DownlinkConfig {
    fn default() -> Self {
        DownlinkConfig {
            transport: TransportKind::Sim,
            app_id: "wallet-sim".into(),
            mqtt_url: None,
            worker_interval_ms: 200,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Config> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Config = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        // Relative paths are relative to the config file.
        if let Some(base) = path.parent() {
            for p in [&mut cfg.data_dir, &mut cfg.ui_dir] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            for p in &mut cfg.ingest.replay {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.train.ensemble_weight) {
            anyhow::bail!("ensemble_weight must lie in [0, 1]");
        }
        crate::auth::Users::new(self.users.clone())?;
        Ok(())
    }

    pub fn store_dir(&self) -> PathBuf {
        self.data_dir.join("series")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.data_dir.join("models")
    }
}

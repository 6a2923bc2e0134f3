//! The assembled service: shared state plus its background workers.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration as StdDuration;

use anyhow::Context;
use serde::Serialize;
use wallet_core::forecaster::{train, Registry, TrainConfig};
use wallet_core::Timestamp;
use wallet_store::{Store, StoreOptions};

use crate::auth::Users;
use crate::config::{Config, SinkConfig, TransportKind};
use crate::dataset::all_rows;
use crate::downlink::{start_worker, DownlinkQueue, DownlinkTransport, MqttTransport, SimOutbox, WorkerHandle};
use crate::ingest::{run_listener, Ingestor, Listener, Source};
use crate::notify::{Dispatcher, LogSink, NotificationLog, NotificationSink, WebhookSink};
use crate::online::{ModelSlot, OnlineForecaster};
use crate::rules::RuleEngine;
use crate::sensors::SensorBook;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum TrainJob {
    Idle,
    Running { seed: u64, started_at: Timestamp },
    Done { version: String, finished_at: Timestamp },
    Failed { error: String, finished_at: Timestamp },
}

pub struct App {
    pub config: Config,
    pub store: Arc<Store>,
    pub rules: Arc<RuleEngine>,
    pub dispatcher: Arc<Dispatcher>,
    pub sensors: Arc<SensorBook>,
    pub downlinks: Arc<DownlinkQueue>,
    pub sim_outbox: Arc<SimOutbox>,
    pub registry: Arc<Registry>,
    pub models: Arc<ModelSlot>,
    pub ingestor: Arc<Ingestor>,
    pub users: Users,
    pub training: Mutex<TrainJob>,
}

pub fn build_sinks(cfg: &[SinkConfig]) -> Vec<Arc<dyn NotificationSink>> {
    cfg.iter()
        .map(|s| -> Arc<dyn NotificationSink> {
            match s {
                SinkConfig::Log => Arc::new(LogSink),
                SinkConfig::Webhook { name, url } => Arc::new(WebhookSink::new(name.clone(), url.clone())),
            }
        })
        .collect()
}

impl App {
    pub fn open(config: Config) -> anyhow::Result<App> {
        let sinks = build_sinks(&config.sinks);
        App::with_sinks(config, sinks)
    }

    pub fn with_sinks(config: Config, sinks: Vec<Arc<dyn NotificationSink>>) -> anyhow::Result<App> {
        config.validate()?;
        let dir = &config.data_dir;
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let store = Arc::new(Store::open(
            config.store_dir(),
            StoreOptions {
                fsync: config.store_fsync,
                ..Default::default()
            },
        )?);
        let rules = Arc::new(RuleEngine::persistent(dir.join("rules.json"))?);
        let dispatcher = Arc::new(Dispatcher::start(sinks, Arc::new(NotificationLog::new(10_000))));
        let registry = Arc::new(Registry::open(config.models_dir())?);
        let models = Arc::new(ModelSlot::default());
        models.load_current(&registry)?;
        let online = Arc::new(OnlineForecaster::new(models.clone(), config.dataset.clone()));
        let ingestor = Arc::new(Ingestor::new(store.clone(), rules.clone(), dispatcher.clone(), Some(online)));
        Ok(App {
            users: Users::new(config.users.clone())?,
            sensors: Arc::new(SensorBook::persistent(dir.join("sensors.json"))?),
            downlinks: Arc::new(DownlinkQueue::persistent(dir.join("downlinks.json"))?),
            sim_outbox: Arc::new(SimOutbox::default()),
            training: Mutex::new(TrainJob::Idle),
            config,
            store,
            rules,
            dispatcher,
            registry,
            models,
            ingestor,
        })
    }

    /// Starts every ingest source named in the config.
    pub fn start_ingest(&self) -> anyhow::Result<Vec<Listener>> {
        let mut out = Vec::new();
        let ing = &self.config.ingest;
        for path in &ing.replay {
            out.push(run_listener(Source::Replay(path.clone()), self.ingestor.clone())?);
        }
        if let Some(port) = ing.tcp_port {
            let addr: SocketAddr = format!("{}:{port}", ing.tcp_host).parse().context("ingest tcp address")?;
            out.push(run_listener(Source::Tcp(addr), self.ingestor.clone())?);
        }
        if let Some(m) = &ing.mqtt {
            out.push(run_listener(
                Source::Mqtt {
                    url: m.url.clone(),
                    topic: m.topic.clone(),
                },
                self.ingestor.clone(),
            )?);
        }
        Ok(out)
    }

    pub fn start_downlink_worker(&self) -> anyhow::Result<WorkerHandle> {
        let d = &self.config.downlink;
        let transport: Arc<dyn DownlinkTransport> = match d.transport {
            TransportKind::Sim => self.sim_outbox.clone(),
            TransportKind::Mqtt => {
                let url = d
                    .mqtt_url
                    .clone()
                    .or_else(|| self.config.ingest.mqtt.as_ref().map(|m| m.url.clone()))
                    .context("the mqtt downlink transport needs downlink.mqtt_url or ingest.mqtt")?;
                Arc::new(MqttTransport::connect(&url, &d.app_id)?)
            }
        };
        Ok(start_worker(self.downlinks.clone(), transport, StdDuration::from_millis(d.worker_interval_ms)))
    }

    /// Trains on everything stored, publishes, and starts serving the result.
    pub fn train_and_publish(&self, cfg: &TrainConfig) -> anyhow::Result<String> {
        let rows = all_rows(&self.store, &self.config.dataset, cfg.cadence())?;
        log::info!("training on {} rows with seed {}", rows.len(), cfg.seed);
        let outcome = train(&rows, cfg)?;
        let version = self.registry.publish(&outcome, cfg)?;
        self.models.set(self.registry.load(&version)?);
        log::info!(
            "published {version}: ffnn mae {:.4}, lstm mae {:.4}, ensemble mae {:.4}",
            outcome.metrics.ffnn_mae,
            outcome.metrics.lstm_mae,
            outcome.metrics.ensemble_mae
        );
        Ok(version)
    }

    /// Flushes notifications and the store.
    pub fn shutdown(&self) -> anyhow::Result<()> {
        self.dispatcher.shutdown();
        self.store.close()?;
        Ok(())
    }
}

//! `wallet`: the service and its maintenance commands.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::json;
use wallet_core::features::{fit_norm, read_dataset_csv, FeatureRow};
use wallet_core::forecaster::{evaluate, persistence, train, ModelKind, Registry, TrainConfig};
use wallet_core::reading::AIR_PRESSURE;
use wallet_core::sim::{run_device, DeviceRole, Pacing, SimDeviceState, SimError, SimScenario, UplinkSink};
use wallet_core::uplink::{parse_uplink, to_reading};
use wallet_core::{Duration, Timestamp};
use wallet_server::api;
use wallet_server::app::App;
use wallet_server::config::{Config, MqttConfig};
use wallet_server::dataset::all_rows;
use wallet_server::downlink::SimLink;
use wallet_server::ingest::{run_listener, ReadingSink, Source};
use wallet_server::online::forecast_from_store;
use wallet_server::pipeline::{self, PipelineOptions};
use wallet_store::{SeriesKey, Store, StoreOptions};

#[derive(Parser)]
#[command(name = "wallet", version, about = "Sensor wallet service and tools")]
struct Cli {
    /// Service config (JSON). Defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the HTTP API with the configured ingest listeners.
    Serve {
        #[arg(long)]
        ingest_tcp_port: Option<u16>,
        /// Subscribe to uplinks on this broker, e.g. mqtt://localhost:1883.
        #[arg(long)]
        mqtt_url: Option<String>,
        #[arg(long)]
        mqtt_topic: Option<String>,
        /// Run the two simulated devices in-process, starting now.
        #[arg(long)]
        simulate: bool,
        /// Simulated seconds per real second when simulating.
        #[arg(long, default_value_t = 60.0)]
        speedup: f64,
    },
    /// Replay NDJSON uplink files into the store, evaluating rules.
    Ingest { files: Vec<PathBuf> },
    /// Import a `timestamp,<metric>` CSV as one series.
    ImportWeather {
        file: PathBuf,
        #[arg(long)]
        device: Option<String>,
        #[arg(long, default_value = AIR_PRESSURE)]
        metric: String,
    },
    /// Train both networks and publish a new model version.
    Train {
        /// `store` or a dataset CSV path.
        #[arg(long, default_value = "store")]
        from: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Test-split metrics of a published version.
    Evaluate {
        #[arg(long)]
        model: String,
        #[arg(long, default_value = "store")]
        from: String,
        /// Write per-tick residuals of every model kind here.
        #[arg(long)]
        residuals: Option<PathBuf>,
    },
    /// Forecast the next steps from stored data with the current model.
    Predict {
        #[arg(long)]
        device: String,
        #[arg(long, default_value_t = 1)]
        steps: usize,
    },
    /// Simulate, ingest, train, publish, forecast and alert in one run.
    Pipeline {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
        /// Scenario JSON; the default scenario otherwise.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Alert when the forecast exceeds this value.
        #[arg(long, default_value_t = 350.0)]
        threshold: f64,
    },
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn open_store(cfg: &Config) -> anyhow::Result<Store> {
    Ok(Store::open(
        cfg.store_dir(),
        StoreOptions {
            fsync: cfg.store_fsync,
            ..Default::default()
        },
    )?)
}

fn rows_from(source: &str, cfg: &Config, cadence: Duration) -> anyhow::Result<Vec<FeatureRow>> {
    if source == "store" {
        let store = open_store(cfg)?;
        let rows = all_rows(&store, &cfg.dataset, cadence)?;
        store.close()?;
        Ok(rows)
    } else {
        let file = std::fs::File::open(source).with_context(|| format!("opening {source}"))?;
        Ok(read_dataset_csv(file)?)
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = load_config(&cli.config)?;
    match cli.cmd {
        Cmd::Serve {
            ingest_tcp_port,
            mqtt_url,
            mqtt_topic,
            simulate,
            speedup,
        } => {
            if let Some(p) = ingest_tcp_port {
                cfg.ingest.tcp_port = Some(p);
            }
            if let Some(url) = mqtt_url {
                cfg.ingest.mqtt = Some(MqttConfig {
                    url,
                    topic: mqtt_topic.unwrap_or_else(wallet_server::config::default_topic),
                });
            } else if mqtt_topic.is_some() {
                bail!("--mqtt-topic needs --mqtt-url");
            }
            serve(cfg, simulate, speedup)
        }
        Cmd::Ingest { files } => {
            if files.is_empty() {
                bail!("name at least one NDJSON file");
            }
            let app = App::open(cfg)?;
            for f in files {
                let l = run_listener(Source::Replay(f.clone()), app.ingestor.clone())?;
                l.wait();
                let s = l.stats().snapshot();
                l.close();
                println!("{}: {} lines, {} stored, {} malformed, {} failed", f.display(), s.lines, s.delivered, s.malformed, s.sink_errors);
            }
            app.shutdown()
        }
        Cmd::ImportWeather { file, device, metric } => {
            let device = device.unwrap_or_else(|| cfg.dataset.pressure_device.clone());
            let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let store = open_store(&cfg)?;
            let n = store.import_csv(&SeriesKey::new(device.as_str(), metric.as_str())?, &text)?;
            store.close()?;
            println!("imported {} points into {device}/{metric}", n.rows);
            Ok(())
        }
        Cmd::Train { from, seed, epochs } => {
            let mut tc: TrainConfig = cfg.train.clone();
            if let Some(s) = seed {
                tc.seed = s;
            }
            if let Some(e) = epochs {
                tc = tc.with_epochs(e);
            }
            let rows = rows_from(&from, &cfg, tc.cadence())?;
            log::info!("training on {} rows", rows.len());
            let outcome = train(&rows, &tc)?;
            let version = Registry::open(cfg.models_dir())?.publish(&outcome, &tc)?;
            print_json(&json!({"version": version, "split": outcome.split, "metrics": outcome.metrics}));
            Ok(())
        }
        Cmd::Evaluate { model, from, residuals } => evaluate_cmd(&cfg, &model, &from, residuals.as_deref()),
        Cmd::Predict { device, steps } => {
            if device != cfg.dataset.soil_device {
                bail!("the model forecasts {}, not {device}", cfg.dataset.soil_device);
            }
            let models = Registry::open(cfg.models_dir())?.load_current()?;
            let store = open_store(&cfg)?;
            let out = forecast_from_store(&store, &cfg.dataset, &models, steps, Some(Timestamp::now()))?;
            store.close()?;
            print_json(&json!({"device_id": device, "model_version": models.version, "results": out}));
            Ok(())
        }
        Cmd::Pipeline {
            seed,
            epochs,
            out,
            scenario,
            threshold,
        } => {
            let mut opts = PipelineOptions::new(out, seed);
            if let Some(path) = scenario {
                let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                opts.scenario = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                opts.scenario.seed = seed;
                opts.train.cadence_mins = opts.scenario.cadence_mins;
            }
            opts.train = opts.train.with_epochs(epochs);
            opts.alert_threshold = threshold;
            opts.base = cfg;
            let report = pipeline::run(&opts)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn evaluate_cmd(cfg: &Config, version: &str, from: &str, residuals: Option<&Path>) -> anyhow::Result<()> {
    let registry = Registry::open(cfg.models_dir())?;
    let info = registry.info(version)?;
    let models = registry.load(version)?;
    let rows = rows_from(from, cfg, models.cadence)?;
    let (n_train, n_val, _) = info.config.split.sizes(rows.len())?;
    let stats = fit_norm(&rows[..n_train])?;
    // The LSTM's first test window reads the last validation rows.
    let test_start = n_train + n_val;
    let window = &rows[test_start.saturating_sub(models.lookback)..];
    let mut out = serde_json::Map::new();
    let mut all = Vec::new();
    for kind in [ModelKind::Ffnn, ModelKind::Lstm, ModelKind::Ensemble] {
        let slice = if kind == ModelKind::Ffnn { &rows[test_start..] } else { window };
        let e = evaluate(&models, kind, slice, &stats)?;
        out.insert(format!("{kind:?}").to_lowercase(), json!({"mae": e.mae_raw, "msle_normalized": e.msle_normalized, "n": e.residuals.len()}));
        all.push(e);
    }
    let p = persistence(window, models.cadence)?;
    out.insert("persistence".into(), json!({"mae": p.mae_raw, "n": p.residuals.len()}));
    all.push(p);
    if let Some(path) = residuals {
        let mut w = String::from("model,timestamp,actual,predicted,residual\n");
        for e in &all {
            for r in &e.residuals {
                w.push_str(&format!("{:?},{},{},{},{}\n", e.kind, r.timestamp.to_rfc3339(), r.actual, r.predicted, r.residual()));
            }
        }
        std::fs::write(path, w).with_context(|| format!("writing {}", path.display()))?;
    }
    print_json(&json!({"version": version, "test_rows": rows.len() - test_start, "results": out}));
    Ok(())
}

/// Hands simulated uplinks straight to the ingestor.
struct DirectUplinks(Arc<dyn ReadingSink>);

impl UplinkSink for DirectUplinks {
    fn send(&mut self, json: &str) -> Result<(), SimError> {
        let msg = parse_uplink(json).map_err(|e| SimError::SinkUnavailable(e.to_string()))?;
        self.0.accept(to_reading(&msg)).map_err(SimError::SinkUnavailable)
    }
}

fn spawn_simulation(app: &Arc<App>, speedup: f64) -> anyhow::Result<()> {
    let cadence = Duration::from_mins(app.config.train.cadence_mins);
    let now = Timestamp::now().micros();
    let start = Timestamp::from_micros(now - now.rem_euclid(cadence.micros()));
    let scenario = SimScenario {
        start,
        soil_device: app.config.dataset.soil_device.clone(),
        weather_device: app.config.dataset.weather_device.clone(),
        app_id: app.config.downlink.app_id.clone(),
        cadence_mins: app.config.train.cadence_mins,
        ..Default::default()
    };
    let trace = Arc::new(wallet_core::sim::generate_trace(&scenario)?);
    let pressure = SeriesKey::new(app.config.dataset.pressure_device.as_str(), AIR_PRESSURE)?;
    app.store.import_csv(&pressure, &wallet_core::sim::pressure_csv(&trace))?;
    for (id, role) in [(scenario.soil_device.clone(), DeviceRole::Soil), (scenario.weather_device.clone(), DeviceRole::Weather)] {
        let (scenario, trace, app) = (scenario.clone(), trace.clone(), app.clone());
        std::thread::Builder::new().name(format!("sim-{id}")).spawn(move || {
            let mut state = SimDeviceState::new(id.clone(), role, scenario.cadence());
            let mut sink = DirectUplinks(app.ingestor.clone());
            let mut link = SimLink::new(app.sim_outbox.clone(), app.downlinks.clone());
            if let Err(e) = run_device(&mut state, &scenario, &trace, &mut sink, &mut link, Pacing::Realtime { speedup }) {
                log::error!("simulated device {id} stopped: {e}");
            }
        })?;
    }
    Ok(())
}

fn serve(cfg: Config, simulate: bool, speedup: f64) -> anyhow::Result<()> {
    let bind = cfg.http_bind.clone();
    let app = Arc::new(App::open(cfg)?);
    let listeners = app.start_ingest()?;
    for l in &listeners {
        if let Some(addr) = l.local_addr() {
            log::info!("ingest listening on {addr}");
        }
    }
    let worker = app.start_downlink_worker()?;
    if simulate {
        spawn_simulation(&app, speedup)?;
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&bind).await.with_context(|| format!("binding {bind}"))?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        };
        api::serve(app.clone(), listener, shutdown).await?;
        anyhow::Ok(())
    })?;
    for l in listeners {
        l.close();
    }
    worker.stop();
    app.shutdown()
}

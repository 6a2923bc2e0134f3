//! One-shot end-to-end run: simulate, ingest, train, publish, forecast and
//! alert on the forecast, all inside one output directory.
//!
//! The trace is split in two. The history part is replayed before training.
//! The live part is replayed after publication, so every live tick yields an
//! online forecast that the rules engine sees as `soil_moisture_pred`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use serde::Serialize;
use wallet_core::forecaster::{ModelInfo, TestMetrics, TrainConfig};
use wallet_core::reading::{AIR_PRESSURE, SOIL_MOISTURE_PRED};
use wallet_core::sim::{generate_trace, pressure_csv, run_device, DeviceRole, NoDownlinks, Pacing, SimDeviceState, SimScenario};
use wallet_core::uplink::parse_uplink;
use wallet_core::Timestamp;
use wallet_store::SeriesKey;

use crate::app::{build_sinks, App};
use crate::config::{Config, IngestConfig};
use crate::ingest::{run_listener, Source, StatsSnapshot};
use crate::online::forecast_from_store;
use crate::rules::{Aggregation, Operator, RuleKind, RuleSpec};

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub out: PathBuf,
    pub scenario: SimScenario,
    pub train: TrainConfig,
    /// Share of the trace ingested before training; the rest is replayed live.
    pub history_fraction: f64,
    /// Alert when the forecast exceeds this many counts.
    pub alert_threshold: f64,
    pub alert_cooldown_secs: i64,
    pub horizon: usize,
    /// Base service config; data_dir and ingest are replaced.
    pub base: Config,
}

impl PipelineOptions {
    pub fn new(out: impl Into<PathBuf>, seed: u64) -> PipelineOptions {
        let scenario = SimScenario {
            seed,
            ..Default::default()
        };
        let train = TrainConfig {
            seed,
            cadence_mins: scenario.cadence_mins,
            ..Default::default()
        };
        PipelineOptions {
            out: out.into(),
            scenario,
            train,
            history_fraction: 0.9,
            alert_threshold: 350.0,
            alert_cooldown_secs: 6 * 3600,
            horizon: 6,
            base: Config::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiredAlert {
    pub rule_id: u64,
    pub fired_at: Timestamp,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForecastPoint {
    pub timestamp: Timestamp,
    pub ffnn: f64,
    pub lstm: f64,
    pub ensemble: f64,
}

/// Everything the run produced, free of wall-clock values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub epochs: usize,
    pub uplinks: usize,
    pub history_uplinks: usize,
    pub live_uplinks: usize,
    pub history_ingest: StatsSnapshot,
    pub live_ingest: StatsSnapshot,
    pub pressure_points: usize,
    pub model_version: String,
    pub split: [usize; 3],
    pub metrics: TestMetrics,
    pub online_forecasts: usize,
    pub forecast: Vec<ForecastPoint>,
    pub alert_rule_id: u64,
    pub alerts: Vec<FiredAlert>,
}

/// Uplinks of both simulated devices, merged by timestamp.
pub fn simulate_uplinks(scenario: &SimScenario) -> anyhow::Result<(Vec<String>, String)> {
    let trace = generate_trace(scenario)?;
    let period = scenario.cadence();
    let mut lines = Vec::new();
    for (id, role) in [(&scenario.soil_device, DeviceRole::Soil), (&scenario.weather_device, DeviceRole::Weather)] {
        let mut state = SimDeviceState::new(id.clone(), role, period);
        let mut out: Vec<String> = Vec::new();
        run_device(&mut state, scenario, &trace, &mut out, &mut NoDownlinks, Pacing::Virtual)?;
        for line in out {
            let at = parse_uplink(&line).context("simulator produced an invalid uplink")?.received_at;
            lines.push((at, line));
        }
    }
    // Stable: the soil uplink of a tick precedes the weather uplink.
    lines.sort_by_key(|(at, _)| *at);
    Ok((lines.into_iter().map(|(_, l)| l).collect(), pressure_csv(&trace)))
}

fn write_lines(path: &Path, lines: &[String]) -> anyhow::Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn replay(app: &App, path: &Path) -> anyhow::Result<StatsSnapshot> {
    let listener = run_listener(Source::Replay(path.to_owned()), app.ingestor.clone())?;
    listener.wait();
    let stats = listener.stats().snapshot();
    listener.close();
    Ok(stats)
}

pub fn run(opts: &PipelineOptions) -> anyhow::Result<PipelineReport> {
    if !(0.0..1.0).contains(&opts.history_fraction) || opts.history_fraction == 0.0 {
        bail!("history fraction must lie in (0, 1)");
    }
    let data_dir = opts.out.join("data");
    if data_dir.exists() {
        bail!("{} already exists; pick an empty output directory", data_dir.display());
    }
    std::fs::create_dir_all(&opts.out).with_context(|| format!("creating {}", opts.out.display()))?;

    let (uplinks, pressure) = simulate_uplinks(&opts.scenario)?;
    let split_at = ((uplinks.len() as f64) * opts.history_fraction).round() as usize;
    let (history, live) = uplinks.split_at(split_at);
    let history_path = opts.out.join("uplinks-history.ndjson");
    let live_path = opts.out.join("uplinks-live.ndjson");
    write_lines(&history_path, history)?;
    write_lines(&live_path, live)?;
    std::fs::write(opts.out.join("pressure.csv"), &pressure)?;
    log::info!("simulated {} uplinks ({} history, {} live)", uplinks.len(), history.len(), live.len());

    let mut config = opts.base.clone();
    config.data_dir = data_dir;
    config.ingest = IngestConfig {
        tcp_port: None,
        ..Default::default()
    };
    config.dataset.soil_device = opts.scenario.soil_device.clone();
    config.dataset.weather_device = opts.scenario.weather_device.clone();
    config.dataset.pressure_device = opts.scenario.weather_device.clone();
    config.train = opts.train.clone();
    let sinks = build_sinks(&config.sinks);
    let app = Arc::new(App::with_sinks(config, sinks)?);

    let pressure_key = SeriesKey::new(app.config.dataset.pressure_device.as_str(), AIR_PRESSURE)?;
    let imported = app.store.import_csv(&pressure_key, &pressure)?;

    let rule = app.rules.create(
        "pipeline",
        RuleSpec {
            device_id: app.config.dataset.soil_device.clone(),
            metric: SOIL_MOISTURE_PRED.to_owned(),
            kind: RuleKind::Instant,
            operator: Operator::Greater,
            threshold: opts.alert_threshold,
            period_secs: None,
            aggregation: Aggregation::Sum,
            cooldown_secs: opts.alert_cooldown_secs,
            enabled: true,
        },
    )?;

    let history_ingest = replay(&app, &history_path)?;
    let version = app.train_and_publish(&opts.train)?;
    let info: ModelInfo = app.registry.info(&version)?;
    let live_ingest = replay(&app, &live_path)?;

    let models = app.models.get().context("published model is not being served")?;
    let forecast = forecast_from_store(&app.store, &app.config.dataset, &models, opts.horizon, None)?
        .into_iter()
        .map(|f| ForecastPoint {
            timestamp: f.timestamp,
            ffnn: f.ffnn_pred,
            lstm: f.lstm_pred,
            ensemble: f.ensemble,
        })
        .collect();
    let pred_key = SeriesKey::new(app.config.dataset.soil_device.as_str(), SOIL_MOISTURE_PRED)?;
    let online_forecasts = app.store.query_all(&pred_key)?.len();

    app.shutdown()?;
    let alerts = app
        .dispatcher
        .log()
        .snapshot()
        .into_iter()
        .filter(|n| n.rule_id == rule.id)
        .map(|n| FiredAlert {
            rule_id: n.rule_id,
            fired_at: n.fired_at,
            value: n.value,
        })
        .collect();

    let report = PipelineReport {
        seed: opts.train.seed,
        epochs: opts.train.ffnn.epochs,
        uplinks: uplinks.len(),
        history_uplinks: history.len(),
        live_uplinks: live.len(),
        history_ingest,
        live_ingest,
        pressure_points: imported.rows,
        model_version: version,
        split: info.split,
        metrics: info.metrics,
        online_forecasts,
        forecast,
        alert_rule_id: rule.id,
        alerts,
    };
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(opts.out.join("report.json"), text + "\n")?;
    Ok(report)
}

//! Synthetic soil and weather traces and simulated devices.
//!
//! Soil moisture (in probe counts) is a dry baseline plus an excess that
//! decays exponentially and is pushed up by rain events spread over a few
//! ticks. The buried transmitter's link degrades linearly with moisture:
//!
//! ```text
//! rssi = rssi_base + rssi_slope * moisture + N(0, sigma_rssi)   (rounded to whole dBm)
//! snr  = snr_base  + snr_slope  * moisture + N(0, sigma_snr)
//! ```
//!
//! The probe reports `moisture + N(0, sensor_sigma)`; the noise-free value is
//! kept alongside as ground truth. Air temperature follows a diurnal sine,
//! humidity moves against temperature and pressure is a random walk.
//!
//! Every random stream is a ChaCha8 stream of the scenario seed, so a
//! scenario and seed fully determine the trace.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::downlink::{DeviceCommand, DownlinkCommand, DownlinkError};
use crate::features::FeatureRow;
use crate::reading::{AIR_HUMIDITY, AIR_TEMPERATURE, RSSI_RANGE, SNR_RANGE, SOIL_MOISTURE};
use crate::time::{Duration, Timestamp, MICROS_PER_MIN};
use crate::uplink::{to_json, Gateway, UplinkMessage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RainEvent {
    pub at: Timestamp,
    /// Total moisture added, in probe counts.
    pub magnitude: f64,
    /// The magnitude is spread evenly over this many minutes.
    #[serde(default = "default_rain_minutes")]
    pub duration_mins: i64,
}

fn default_rain_minutes() -> i64 {
    120
}

/// Poisson rain on top of the explicit schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomRain {
    pub per_day: f64,
    pub mean_magnitude: f64,
    /// Magnitudes are uniform on `mean * [1 - spread, 1 + spread]`.
    pub spread: f64,
    pub duration_mins: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoilParams {
    pub baseline: f64,
    /// Excess over baseline at the start of the trace.
    pub initial_excess: f64,
    pub decay_tau_mins: f64,
    pub sensor_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelParams {
    pub rssi_base: f64,
    pub rssi_slope: f64,
    pub snr_base: f64,
    pub snr_slope: f64,
    pub sigma_rssi: f64,
    pub sigma_snr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeatherParams {
    pub temp_mean: f64,
    pub temp_amplitude: f64,
    pub temp_sigma: f64,
    pub humidity_mean: f64,
    /// %RH change per °C above the mean (negative: drier when warmer).
    pub humidity_coupling: f64,
    pub humidity_sigma: f64,
    pub pressure_start: f64,
    pub pressure_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    pub start: Timestamp,
    pub duration_mins: i64,
    pub cadence_mins: i64,
    pub soil_device: String,
    pub weather_device: String,
    pub app_id: String,
    #[serde(default)]
    pub rain: Vec<RainEvent>,
    #[serde(default)]
    pub random_rain: Option<RandomRain>,
    pub soil: SoilParams,
    pub channel: ChannelParams,
    pub weather: WeatherParams,
    pub seed: u64,
}

impl Default for SimScenario {
    fn default() -> Self {
        SimScenario {
            start: Timestamp::parse_rfc3339("2020-02-15T00:00:00Z").expect("literal"),
            duration_mins: 5000 * 10,
            cadence_mins: 10,
            soil_device: "soil-01".into(),
            weather_device: "weather-01".into(),
            app_id: "wallet-sim".into(),
            rain: Vec::new(),
            random_rain: Some(RandomRain {
                per_day: 1.0,
                mean_magnitude: 200.0,
                spread: 0.5,
                duration_mins: 120,
            }),
            soil: SoilParams {
                baseline: 300.0,
                initial_excess: 100.0,
                decay_tau_mins: 720.0,
                sensor_sigma: 30.0,
            },
            channel: ChannelParams {
                rssi_base: -90.0,
                rssi_slope: -0.05,
                snr_base: 8.0,
                snr_slope: -0.01,
                sigma_rssi: 1.5,
                sigma_snr: 1.0,
            },
            weather: WeatherParams {
                temp_mean: 15.0,
                temp_amplitude: 8.0,
                temp_sigma: 0.5,
                humidity_mean: 65.0,
                humidity_coupling: -2.0,
                humidity_sigma: 2.0,
                pressure_start: 1013.0,
                pressure_sigma: 0.2,
            },
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("sink unavailable: {0}")]
    SinkUnavailable(String),
    #[error(transparent)]
    Downlink(#[from] DownlinkError),
}

impl SimScenario {
    pub fn cadence(&self) -> Duration {
        Duration::from_mins(self.cadence_mins)
    }

    pub fn steps(&self) -> usize {
        (self.duration_mins / self.cadence_mins.max(1)).max(0) as usize
    }

    pub fn end(&self) -> Timestamp {
        self.start + Duration::from_mins(self.duration_mins)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidScenario(m.to_owned()));
        let c = &self.channel;
        if self.cadence_mins <= 0 {
            return bad("cadence must be positive");
        }
        if self.duration_mins < 0 {
            return bad("duration must be non-negative");
        }
        if c.rssi_slope > 0.0 || c.snr_slope > 0.0 {
            return bad("channel slopes must be <= 0");
        }
        let sigmas = [
            c.sigma_rssi,
            c.sigma_snr,
            self.soil.sensor_sigma,
            self.weather.temp_sigma,
            self.weather.humidity_sigma,
            self.weather.pressure_sigma,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("noise sigmas must be finite and >= 0");
        }
        if !(self.soil.decay_tau_mins > 0.0) {
            return bad("decay_tau_mins must be positive");
        }
        if let Some(r) = &self.random_rain {
            if !(r.per_day >= 0.0 && r.mean_magnitude >= 0.0 && (0.0..=1.0).contains(&r.spread) && r.duration_mins >= 0) {
                return bad("random_rain parameters out of range");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub cadence: Duration,
    /// Features and the probe reading, one row per cadence tick.
    pub rows: Vec<FeatureRow>,
    /// Noise-free moisture at each tick.
    pub truth: Vec<f64>,
    /// Every rain event that was applied, explicit and random.
    pub rain: Vec<RainEvent>,
}

impl SimTrace {
    /// Row in effect at `t` (the latest tick not after it).
    pub fn row_at(&self, t: Timestamp) -> Option<&FeatureRow> {
        let idx = self.rows.partition_point(|r| r.timestamp <= t);
        idx.checked_sub(1).map(|i| &self.rows[i])
    }
}

const STREAM_RAIN: u64 = 1;
const STREAM_CHANNEL: u64 = 2;
const STREAM_PROBE: u64 = 3;
const STREAM_WEATHER: u64 = 4;

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated as finite and >= 0")
}

pub fn generate_trace(s: &SimScenario) -> Result<SimTrace, SimError> {
    s.validate()?;
    let steps = s.steps();
    let cadence = s.cadence();
    let tick = |k: usize| s.start + cadence.mul(k as i64);

    let mut rain = s.rain.clone();
    if let Some(r) = &s.random_rain {
        let mut rng = stream(s.seed, STREAM_RAIN);
        let p = r.per_day * s.cadence_mins as f64 / 1440.0;
        for k in 0..steps {
            if rng.gen::<f64>() < p {
                let scale = 1.0 + r.spread * (2.0 * rng.gen::<f64>() - 1.0);
                rain.push(RainEvent {
                    at: tick(k),
                    magnitude: r.mean_magnitude * scale,
                    duration_mins: r.duration_mins,
                });
            }
        }
    }
    rain.sort_by_key(|e| e.at);

    // Per-tick moisture input from rain, spread across each event's duration.
    let mut inflow = vec![0.0; steps];
    for e in &rain {
        let first = (e.at.micros() - s.start.micros()).div_euclid(cadence.micros());
        let span = (e.duration_mins / s.cadence_mins).max(1);
        for k in first..first + span {
            if (0..steps as i64).contains(&k) {
                inflow[k as usize] += e.magnitude / span as f64;
            }
        }
    }

    let mut channel_rng = stream(s.seed, STREAM_CHANNEL);
    let mut probe_rng = stream(s.seed, STREAM_PROBE);
    let mut weather_rng = stream(s.seed, STREAM_WEATHER);
    let (n_rssi, n_snr, n_probe) = (
        normal(s.channel.sigma_rssi),
        normal(s.channel.sigma_snr),
        normal(s.soil.sensor_sigma),
    );
    let w = &s.weather;
    let (n_temp, n_hum, n_press) = (normal(w.temp_sigma), normal(w.humidity_sigma), normal(w.pressure_sigma));
    let rho = (-(s.cadence_mins as f64) / s.soil.decay_tau_mins).exp();

    let mut rows = Vec::with_capacity(steps);
    let mut truth = Vec::with_capacity(steps);
    let mut excess = s.soil.initial_excess;
    let mut pressure = w.pressure_start;
    for k in 0..steps {
        if k > 0 {
            excess *= rho;
            pressure += n_press.sample(&mut weather_rng);
        }
        excess += inflow[k];
        let moisture = s.soil.baseline + excess;

        let rssi = (s.channel.rssi_base + s.channel.rssi_slope * moisture + n_rssi.sample(&mut channel_rng))
            .round()
            .clamp(RSSI_RANGE.0, RSSI_RANGE.1);
        let snr = (s.channel.snr_base + s.channel.snr_slope * moisture + n_snr.sample(&mut channel_rng))
            .clamp(SNR_RANGE.0, SNR_RANGE.1);
        let probe = moisture + n_probe.sample(&mut probe_rng);

        let t = tick(k);
        let hours = (t.micros() as f64 / (60.0 * MICROS_PER_MIN as f64)).rem_euclid(24.0);
        let temp_dev = w.temp_amplitude * (2.0 * PI * (hours - 9.0) / 24.0).sin() + n_temp.sample(&mut weather_rng);
        let humidity = (w.humidity_mean + w.humidity_coupling * temp_dev + n_hum.sample(&mut weather_rng)).clamp(0.0, 100.0);

        rows.push(FeatureRow {
            timestamp: t,
            features: [rssi, snr, w.temp_mean + temp_dev, humidity, pressure],
            target: probe,
        });
        truth.push(moisture);
    }
    Ok(SimTrace {
        cadence,
        rows,
        truth,
        rain,
    })
}

/// `timestamp,air_pressure` rows for the pressure feed.
pub fn pressure_csv(trace: &SimTrace) -> String {
    let mut out = String::from("timestamp,air_pressure\n");
    for r in &trace.rows {
        out.push_str(&format!("{},{}\n", r.timestamp.to_rfc3339(), r.features[4]));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceRole {
    /// Buried probe: soil_moisture, link metrics carry the signal.
    Soil,
    /// Above-ground station: air temperature and humidity.
    Weather,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDeviceState {
    pub device_id: String,
    pub role: DeviceRole,
    pub period: Duration,
    /// Added to true time when stamping uplinks.
    pub clock_offset: Duration,
    pub uplinks_sent: u64,
    pub audit: Vec<String>,
}

pub const MIN_WAKEUP: Duration = Duration::from_mins(1);

impl SimDeviceState {
    pub fn new(device_id: impl Into<String>, role: DeviceRole, period: Duration) -> Self {
        SimDeviceState {
            device_id: device_id.into(),
            role,
            period,
            clock_offset: Duration::ZERO,
            uplinks_sent: 0,
            audit: Vec::new(),
        }
    }
}

/// Applies one command. A time sync shifts the clock by the given offset.
pub fn apply_downlink(state: &mut SimDeviceState, cmd: &DeviceCommand) -> Result<(), SimError> {
    match cmd {
        DeviceCommand::SetWakeupPeriod { minutes } => {
            let period = Duration::from_mins(i64::from(*minutes));
            if period < MIN_WAKEUP {
                return Err(DownlinkError::BadValue(format!("wake-up period {minutes} min is below 1 min")).into());
            }
            state.period = period;
        }
        DeviceCommand::TimeSync { offset_secs } => {
            state.clock_offset = Duration::from_micros(state.clock_offset.micros() + Duration::from_secs(i64::from(*offset_secs)).micros());
        }
        DeviceCommand::Raw(bytes) => {
            state.audit.push(format!("ignored raw downlink of {} bytes", bytes.len()));
            log::info!("{}: ignored raw downlink ({} bytes)", state.device_id, bytes.len());
        }
    }
    Ok(())
}

/// Uplink for `role` at true time `t`, or `None` before the trace starts.
pub fn build_uplink(state: &SimDeviceState, scenario: &SimScenario, trace: &SimTrace, t: Timestamp) -> Option<UplinkMessage> {
    let row = trace.row_at(t)?;
    let mut fields = BTreeMap::new();
    let gateway = match state.role {
        DeviceRole::Soil => {
            fields.insert(SOIL_MOISTURE.to_owned(), row.target);
            Gateway {
                gateway_id: "sim-gw".into(),
                rssi: row.features[0] as i32,
                snr: row.features[1],
            }
        }
        DeviceRole::Weather => {
            fields.insert(AIR_TEMPERATURE.to_owned(), row.features[2]);
            fields.insert(AIR_HUMIDITY.to_owned(), row.features[3]);
            Gateway {
                gateway_id: "sim-gw".into(),
                rssi: -70,
                snr: 9.5,
            }
        }
    };
    Some(UplinkMessage {
        app_id: scenario.app_id.clone(),
        dev_id: state.device_id.clone(),
        port: 1,
        payload_fields: fields,
        received_at: t + state.clock_offset,
        gateways: vec![gateway],
    })
}

pub trait UplinkSink {
    fn send(&mut self, json: &str) -> Result<(), SimError>;
}

impl UplinkSink for Vec<String> {
    fn send(&mut self, json: &str) -> Result<(), SimError> {
        self.push(json.to_owned());
        Ok(())
    }
}

/// Where a device looks for downlinks right after each uplink.
pub trait DownlinkSource {
    /// Commands queued for the device by simulated time `now`.
    fn poll(&mut self, device_id: &str, now: Timestamp) -> Vec<DownlinkCommand>;

    fn ack(&mut self, command_id: u64, ok: bool);
}

/// No downlinks ever.
pub struct NoDownlinks;

impl DownlinkSource for NoDownlinks {
    fn poll(&mut self, _: &str, _: Timestamp) -> Vec<DownlinkCommand> {
        Vec::new()
    }

    fn ack(&mut self, _: u64, _: bool) {}
}

/// Commands scheduled at fixed simulated times, for tests and scripted runs.
#[derive(Debug, Default)]
pub struct ScriptedDownlinks {
    pub queued: Vec<(Timestamp, DownlinkCommand)>,
    pub acks: Vec<(u64, bool)>,
}

impl DownlinkSource for ScriptedDownlinks {
    fn poll(&mut self, device_id: &str, now: Timestamp) -> Vec<DownlinkCommand> {
        let (ready, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.queued)
            .into_iter()
            .partition(|(at, c)| *at <= now && c.device_id == device_id);
        self.queued = rest;
        ready.into_iter().map(|(_, c)| c).collect()
    }

    fn ack(&mut self, command_id: u64, ok: bool) {
        self.acks.push((command_id, ok));
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pacing {
    /// Emit as fast as the sink accepts.
    Virtual,
    /// Sleep between uplinks, compressing simulated time by `speedup`.
    Realtime { speedup: f64 },
}

/// Runs one device from the scenario start to its end.
///
/// Uplinks go out at the start and then every wake-up period. After each
/// uplink the device checks for downlinks (class A receive window), applies
/// and acknowledges them, and schedules the next uplink with the period then
/// in force.
pub fn run_device(
    state: &mut SimDeviceState,
    scenario: &SimScenario,
    trace: &SimTrace,
    sink: &mut dyn UplinkSink,
    downlinks: &mut dyn DownlinkSource,
    pacing: Pacing,
) -> Result<(), SimError> {
    let end = scenario.end();
    let mut t = scenario.start;
    while t < end {
        if let Some(msg) = build_uplink(state, scenario, trace, t) {
            sink.send(&to_json(&msg))?;
            state.uplinks_sent += 1;
        }
        for cmd in downlinks.poll(&state.device_id, t) {
            let ok = cmd
                .command()
                .map_err(SimError::from)
                .and_then(|c| apply_downlink(state, &c))
                .map_err(|e| log::warn!("{}: downlink {} rejected: {e}", state.device_id, cmd.id))
                .is_ok();
            downlinks.ack(cmd.id, ok);
        }
        let next = t + state.period;
        if let Pacing::Realtime { speedup } = pacing {
            let secs = state.period.as_secs_f64() / speedup.max(1e-9);
            std::thread::sleep(std::time::Duration::from_secs_f64(secs.max(0.0)));
        }
        t = next;
    }
    Ok(())
}

//! `wallet-sim`: simulated soil and weather devices.

use std::io::Write;
use std::net::TcpStream;
use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::Duration as StdDuration;

use anyhow::{bail, Context};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use clap::{Parser, ValueEnum};
use wallet_core::downlink::{DownlinkCommand, DownlinkKind, OP_SET_WAKEUP_PERIOD, OP_TIME_SYNC};
use wallet_core::sim::{
    generate_trace, pressure_csv, run_device, DeviceRole, DownlinkSource, NoDownlinks, Pacing, SimDeviceState, SimError, SimScenario,
    SimTrace, UplinkSink,
};
use wallet_core::Timestamp;
use wallet_server::mqtt::MqttUrl;
use wallet_server::pipeline::simulate_uplinks;

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Out {
    Ndjson,
    Tcp,
    Mqtt,
}

#[derive(Parser)]
#[command(name = "wallet-sim", version, about = "Simulated soil and weather devices")]
struct Cli {
    /// Scenario JSON; the built-in default scenario otherwise.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ndjson")]
    out: Out,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// NDJSON output file; stdout when absent.
    #[arg(long)]
    file: Option<PathBuf>,
    /// TCP ingest address.
    #[arg(long, default_value = "127.0.0.1:7600")]
    target: String,
    #[arg(long, default_value = "mqtt://127.0.0.1:1883")]
    mqtt_url: String,
    /// Simulated seconds per real second; 0 sends as fast as possible.
    #[arg(long, default_value_t = 0.0)]
    speedup: f64,
    /// Also write the pressure series as `timestamp,air_pressure`.
    #[arg(long)]
    pressure_csv: Option<PathBuf>,
    /// Print the default scenario JSON and exit.
    #[arg(long)]
    print_scenario: bool,
}

fn pacing(speedup: f64) -> Pacing {
    if speedup > 0.0 {
        Pacing::Realtime { speedup }
    } else {
        Pacing::Virtual
    }
}

struct TcpUplinks(TcpStream);

impl UplinkSink for TcpUplinks {
    fn send(&mut self, json: &str) -> Result<(), SimError> {
        writeln!(self.0, "{json}").map_err(|e| SimError::SinkUnavailable(e.to_string()))
    }
}

struct MqttUplinks {
    client: rumqttc::Client,
    topic: String,
}

impl UplinkSink for MqttUplinks {
    fn send(&mut self, json: &str) -> Result<(), SimError> {
        self.client
            .publish(self.topic.as_str(), rumqttc::QoS::AtLeastOnce, false, json.as_bytes().to_vec())
            .map_err(|e| SimError::SinkUnavailable(e.to_string()))
    }
}

/// Downlinks received from the broker for one device. The TTN downlink body
/// carries no kind, so it is read from the opcode byte.
struct MqttDownlinks {
    rx: Mutex<mpsc::Receiver<(u8, Vec<u8>)>>,
    next_id: u64,
}

fn kind_of(payload: &[u8]) -> DownlinkKind {
    match payload {
        [OP_SET_WAKEUP_PERIOD, _, _] => DownlinkKind::SetWakeupPeriod,
        [OP_TIME_SYNC, _, _, _, _] => DownlinkKind::TimeSync,
        _ => DownlinkKind::Raw,
    }
}

impl DownlinkSource for MqttDownlinks {
    fn poll(&mut self, device_id: &str, now: Timestamp) -> Vec<DownlinkCommand> {
        let rx = self.rx.lock().expect("downlink receiver poisoned");
        let mut out = Vec::new();
        while let Ok((port, payload)) = rx.try_recv() {
            self.next_id += 1;
            match DownlinkCommand::new(self.next_id, device_id, port, kind_of(&payload), payload, now) {
                Ok(c) => out.push(c),
                Err(e) => log::warn!("{device_id}: dropped downlink: {e}"),
            }
        }
        out
    }

    fn ack(&mut self, command_id: u64, ok: bool) {
        log::info!("downlink {command_id} applied: {ok}");
    }
}

fn run_mqtt(scenario: &SimScenario, trace: Arc<SimTrace>, url: &str, speedup: f64) -> anyhow::Result<()> {
    let url = MqttUrl::parse(url)?;
    let opts = rumqttc::MqttOptions::new(format!("wallet-sim-{}", std::process::id()), url.host, url.port);
    let (client, mut connection) = rumqttc::Client::new(opts, 256);
    let down_filter = format!("{}/devices/+/down", scenario.app_id);
    client.subscribe(down_filter.as_str(), rumqttc::QoS::AtLeastOnce)?;
    let mut routes = std::collections::HashMap::new();
    let mut receivers = Vec::new();
    for id in [&scenario.soil_device, &scenario.weather_device] {
        let (tx, rx) = mpsc::channel();
        routes.insert(format!("{}/devices/{id}/down", scenario.app_id), tx);
        receivers.push(rx);
    }
    std::thread::spawn(move || {
        for event in connection.iter() {
            match event {
                Ok(rumqttc::Event::Incoming(rumqttc::Packet::Publish(p))) => {
                    let Some(tx) = routes.get(&p.topic) else { continue };
                    let parsed: Option<(u8, Vec<u8>)> = serde_json::from_slice::<serde_json::Value>(&p.payload).ok().and_then(|v| {
                        let port = v.get("port")?.as_u64()? as u8;
                        let raw = STANDARD.decode(v.get("payload_raw")?.as_str()?).ok()?;
                        Some((port, raw))
                    });
                    match parsed {
                        Some(d) => {
                            let _ = tx.send(d);
                        }
                        None => log::warn!("unreadable downlink on {}", p.topic),
                    }
                }
                Ok(_) => {}
                Err(e) => {
                    log::warn!("broker connection: {e}");
                    std::thread::sleep(StdDuration::from_secs(1));
                }
            }
        }
    });
    let mut handles = Vec::new();
    let roles = [(scenario.soil_device.clone(), DeviceRole::Soil), (scenario.weather_device.clone(), DeviceRole::Weather)];
    for ((id, role), rx) in roles.into_iter().zip(receivers) {
        let (scenario, trace, client) = (scenario.clone(), trace.clone(), client.clone());
        handles.push(std::thread::spawn(move || -> Result<(), SimError> {
            let mut state = SimDeviceState::new(id.clone(), role, scenario.cadence());
            let mut sink = MqttUplinks {
                client,
                topic: format!("{}/devices/{id}/up", scenario.app_id),
            };
            let mut down = MqttDownlinks {
                rx: Mutex::new(rx),
                next_id: 0,
            };
            run_device(&mut state, &scenario, &trace, &mut sink, &mut down, pacing(speedup))
        }));
    }
    for h in handles {
        h.join().expect("device thread panicked")?;
    }
    // Let the event loop flush queued publishes.
    std::thread::sleep(StdDuration::from_millis(500));
    client.disconnect()?;
    Ok(())
}

fn run_tcp(scenario: &SimScenario, trace: Arc<SimTrace>, target: &str, speedup: f64) -> anyhow::Result<()> {
    let mut handles = Vec::new();
    for (id, role) in [(scenario.soil_device.clone(), DeviceRole::Soil), (scenario.weather_device.clone(), DeviceRole::Weather)] {
        let stream = TcpStream::connect(target).with_context(|| format!("connecting to {target}"))?;
        let (scenario, trace) = (scenario.clone(), trace.clone());
        handles.push(std::thread::spawn(move || -> Result<(), SimError> {
            let mut state = SimDeviceState::new(id, role, scenario.cadence());
            let mut sink = TcpUplinks(stream);
            run_device(&mut state, &scenario, &trace, &mut sink, &mut NoDownlinks, pacing(speedup))
        }));
    }
    for h in handles {
        h.join().expect("device thread panicked")?;
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.print_scenario {
        println!("{}", serde_json::to_string_pretty(&SimScenario::default())?);
        return Ok(());
    }
    let mut scenario = match &cli.scenario {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SimScenario::default(),
    };
    if let Some(seed) = cli.seed {
        scenario.seed = seed;
    }
    scenario.validate()?;
    let trace = Arc::new(generate_trace(&scenario)?);
    if let Some(p) = &cli.pressure_csv {
        std::fs::write(p, pressure_csv(&trace)).with_context(|| format!("writing {}", p.display()))?;
    }
    match cli.out {
        Out::Ndjson => {
            if cli.speedup > 0.0 {
                bail!("--speedup applies to tcp and mqtt output only");
            }
            let (lines, _) = simulate_uplinks(&scenario)?;
            let mut text = lines.join("\n");
            text.push('\n');
            match &cli.file {
                Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
                None => std::io::stdout().lock().write_all(text.as_bytes())?,
            }
        }
        Out::Tcp => run_tcp(&scenario, trace, &cli.target, cli.speedup)?,
        Out::Mqtt => run_mqtt(&scenario, trace, &cli.mqtt_url, cli.speedup)?,
    }
    Ok(())
}

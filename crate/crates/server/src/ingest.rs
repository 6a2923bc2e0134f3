//! Uplink listeners and the store-then-evaluate reading consumer.
//!
//! All three sources feed lines through the same path: parse, convert to a
//! reading, hand to the sink. A line that does not parse is counted and
//! logged and never reaches the sink.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, ErrorKind, Read};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration as StdDuration;

use serde::Serialize;
use wallet_core::reading::{SensorReading, SeriesPoint, SOIL_MOISTURE_PRED};
use wallet_core::uplink::{parse_uplink, to_reading};
use wallet_store::{SeriesKey, Store};

use crate::mqtt::{topic_matches, MqttUrl};
use crate::notify::Dispatcher;
use crate::online::OnlineForecaster;
use crate::rules::RuleEngine;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("source unavailable: {0}")]
    SourceUnavailable(String),
}

/// Consumer of decoded readings. Calls for one device are never concurrent.
pub trait ReadingSink: Send + Sync {
    fn accept(&self, reading: SensorReading) -> Result<(), String>;
}

#[derive(Debug, Default)]
pub struct ListenerStats {
    pub lines: AtomicU64,
    pub delivered: AtomicU64,
    pub malformed: AtomicU64,
    /// Valid messages the sink refused, for instance on a store failure.
    pub sink_errors: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StatsSnapshot {
    pub lines: u64,
    pub delivered: u64,
    pub malformed: u64,
    pub sink_errors: u64,
}

impl ListenerStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            lines: self.lines.load(Ordering::Acquire),
            delivered: self.delivered.load(Ordering::Acquire),
            malformed: self.malformed.load(Ordering::Acquire),
            sink_errors: self.sink_errors.load(Ordering::Acquire),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Replay(PathBuf),
    Tcp(SocketAddr),
    Mqtt { url: String, topic: String },
}

struct Shared {
    sink: Arc<dyn ReadingSink>,
    stats: Arc<ListenerStats>,
    stop: AtomicBool,
}

impl Shared {
    fn line(&self, line: &str) {
        let line = line.trim();
        if line.is_empty() {
            return;
        }
        self.stats.lines.fetch_add(1, Ordering::AcqRel);
        match parse_uplink(line) {
            Err(e) => {
                self.stats.malformed.fetch_add(1, Ordering::AcqRel);
                log::warn!("rejected uplink: {e}");
            }
            Ok(msg) => {
                if self.stop.load(Ordering::Acquire) {
                    return;
                }
                match self.sink.accept(to_reading(&msg)) {
                    Ok(()) => self.stats.delivered.fetch_add(1, Ordering::AcqRel),
                    Err(e) => {
                        log::error!("reading from {} not stored: {e}", msg.dev_id);
                        self.stats.sink_errors.fetch_add(1, Ordering::AcqRel)
                    }
                };
            }
        }
    }
}

/// A running listener. Once [`Listener::close`] returns the sink is never
/// called again.
pub struct Listener {
    shared: Arc<Shared>,
    threads: Arc<Mutex<Vec<JoinHandle<()>>>>,
    local_addr: Option<SocketAddr>,
    mqtt: Option<rumqttc::Client>,
}

impl Listener {
    pub fn stats(&self) -> Arc<ListenerStats> {
        self.shared.stats.clone()
    }

    /// Bound address of a TCP listener.
    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.local_addr
    }

    /// Waits for a replay to reach the end of its file.
    pub fn wait(&self) {
        loop {
            let handle = self.threads.lock().expect("listener threads poisoned").pop();
            match handle {
                Some(h) => {
                    let _ = h.join();
                }
                None => return,
            }
        }
    }

    pub fn close(self) {
        self.shared.stop.store(true, Ordering::Release);
        if let Some(c) = &self.mqtt {
            let _ = c.disconnect();
        }
        self.wait();
    }
}

pub fn run_listener(source: Source, sink: Arc<dyn ReadingSink>) -> Result<Listener, IngestError> {
    let shared = Arc::new(Shared {
        sink,
        stats: Arc::new(ListenerStats::default()),
        stop: AtomicBool::new(false),
    });
    let threads = Arc::new(Mutex::new(Vec::new()));
    let mut listener = Listener {
        shared: shared.clone(),
        threads: threads.clone(),
        local_addr: None,
        mqtt: None,
    };
    match source {
        Source::Replay(path) => {
            let file = File::open(&path).map_err(|e| IngestError::SourceUnavailable(format!("{}: {e}", path.display())))?;
            let t = thread::Builder::new()
                .name("ingest-replay".into())
                .spawn(move || replay(file, &shared))
                .expect("spawn replay thread");
            threads.lock().expect("listener threads poisoned").push(t);
        }
        Source::Tcp(addr) => {
            let tcp = TcpListener::bind(addr).map_err(|e| IngestError::SourceUnavailable(format!("bind {addr}: {e}")))?;
            tcp.set_nonblocking(true).map_err(|e| IngestError::SourceUnavailable(e.to_string()))?;
            listener.local_addr = tcp.local_addr().ok();
            log::info!("ingest listening on tcp {}", listener.local_addr.expect("bound"));
            let conns = threads.clone();
            let t = thread::Builder::new()
                .name("ingest-tcp".into())
                .spawn(move || accept_loop(tcp, shared, conns))
                .expect("spawn tcp thread");
            threads.lock().expect("listener threads poisoned").push(t);
        }
        Source::Mqtt { url, topic } => {
            let (client, t) = mqtt_subscribe(&url, &topic, shared)?;
            listener.mqtt = Some(client);
            threads.lock().expect("listener threads poisoned").push(t);
        }
    }
    Ok(listener)
}

fn replay(file: File, shared: &Shared) {
    for line in BufReader::new(file).lines() {
        if shared.stop.load(Ordering::Acquire) {
            return;
        }
        match line {
            Ok(l) => shared.line(&l),
            Err(e) => {
                // Bad UTF-8 on one line; the reader moves on to the next.
                shared.stats.lines.fetch_add(1, Ordering::AcqRel);
                shared.stats.malformed.fetch_add(1, Ordering::AcqRel);
                log::warn!("unreadable replay line: {e}");
            }
        }
    }
}

fn accept_loop(tcp: TcpListener, shared: Arc<Shared>, threads: Arc<Mutex<Vec<JoinHandle<()>>>>) {
    while !shared.stop.load(Ordering::Acquire) {
        match tcp.accept() {
            Ok((stream, peer)) => {
                log::debug!("ingest connection from {peer}");
                let shared = shared.clone();
                let t = thread::Builder::new()
                    .name(format!("ingest-{peer}"))
                    .spawn(move || connection(stream, &shared))
                    .expect("spawn connection thread");
                threads.lock().expect("listener threads poisoned").push(t);
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(StdDuration::from_millis(20)),
            Err(e) => {
                log::error!("ingest accept: {e}");
                thread::sleep(StdDuration::from_millis(100));
            }
        }
    }
}

fn connection(mut stream: TcpStream, shared: &Shared) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_read_timeout(Some(StdDuration::from_millis(100)));
    let mut pending: Vec<u8> = Vec::new();
    let mut buf = [0u8; 8192];
    while !shared.stop.load(Ordering::Acquire) {
        match stream.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => {
                pending.extend_from_slice(&buf[..n]);
                let mut start = 0;
                while let Some(off) = pending[start..].iter().position(|&b| b == b'\n') {
                    let end = start + off;
                    match std::str::from_utf8(&pending[start..end]) {
                        Ok(l) => shared.line(l),
                        Err(_) => {
                            shared.stats.lines.fetch_add(1, Ordering::AcqRel);
                            shared.stats.malformed.fetch_add(1, Ordering::AcqRel);
                        }
                    }
                    start = end + 1;
                }
                pending.drain(..start);
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {}
            Err(e) => {
                log::warn!("ingest connection: {e}");
                break;
            }
        }
    }
    // A final line without its newline still counts.
    if !pending.is_empty() && !shared.stop.load(Ordering::Acquire) {
        shared.line(&String::from_utf8_lossy(&pending));
    }
}

fn mqtt_subscribe(url: &str, topic: &str, shared: Arc<Shared>) -> Result<(rumqttc::Client, JoinHandle<()>), IngestError> {
    use rumqttc::{Event, Packet, QoS};
    let unavailable = |m: String| IngestError::SourceUnavailable(m);
    let u = MqttUrl::parse(url).map_err(|e| unavailable(e.to_string()))?;
    let mut opts = rumqttc::MqttOptions::new(format!("wallet-ingest-{}", std::process::id()), u.host, u.port);
    opts.set_keep_alive(StdDuration::from_secs(30));
    let (client, mut conn) = rumqttc::Client::new(opts, 256);
    // Fail fast when the broker is not there.
    loop {
        match conn.recv_timeout(StdDuration::from_secs(5)) {
            Ok(Ok(Event::Incoming(Packet::ConnAck(_)))) => break,
            Ok(Ok(_)) => {}
            Ok(Err(e)) => return Err(unavailable(format!("{url}: {e}"))),
            Err(_) => return Err(unavailable(format!("{url}: no answer from broker"))),
        }
    }
    client
        .subscribe(topic, QoS::AtLeastOnce)
        .map_err(|e| unavailable(e.to_string()))?;
    log::info!("ingest subscribed to {topic} on {url}");
    let filter = topic.to_owned();
    let t = thread::Builder::new()
        .name("ingest-mqtt".into())
        .spawn(move || {
            while !shared.stop.load(Ordering::Acquire) {
                match conn.recv_timeout(StdDuration::from_millis(100)) {
                    Ok(Ok(Event::Incoming(Packet::Publish(p)))) if topic_matches(&filter, &p.topic) => {
                        match std::str::from_utf8(&p.payload) {
                            Ok(s) => shared.line(s),
                            Err(_) => {
                                shared.stats.lines.fetch_add(1, Ordering::AcqRel);
                                shared.stats.malformed.fetch_add(1, Ordering::AcqRel);
                            }
                        }
                    }
                    Ok(Ok(_)) | Err(_) => {}
                    Ok(Err(e)) => {
                        if shared.stop.load(Ordering::Acquire) {
                            break;
                        }
                        log::warn!("mqtt ingest: {e}; reconnecting");
                        thread::sleep(StdDuration::from_millis(500));
                    }
                }
            }
        })
        .expect("spawn mqtt thread");
    Ok((client, t))
}

/// Stores each reading, then evaluates rules on it, then refreshes the
/// online forecast. Readings of one device pass through one at a time.
pub struct Ingestor {
    store: Arc<Store>,
    rules: Arc<RuleEngine>,
    dispatcher: Arc<Dispatcher>,
    online: Option<Arc<OnlineForecaster>>,
    device_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Ingestor {
    pub fn new(
        store: Arc<Store>,
        rules: Arc<RuleEngine>,
        dispatcher: Arc<Dispatcher>,
        online: Option<Arc<OnlineForecaster>>,
    ) -> Ingestor {
        Ingestor {
            store,
            rules,
            dispatcher,
            online,
            device_locks: Mutex::new(HashMap::new()),
        }
    }

    fn device_lock(&self, device_id: &str) -> Arc<Mutex<()>> {
        self.device_locks
            .lock()
            .expect("device locks poisoned")
            .entry(device_id.to_owned())
            .or_default()
            .clone()
    }

    fn store_and_evaluate(&self, device_id: &str, reading: &SensorReading, series: &[(&str, f64)]) -> Result<(), String> {
        for &(metric, value) in series {
            let key = SeriesKey::new(device_id, metric).map_err(|e| e.to_string())?;
            self.store
                .append(&key, SeriesPoint::new(reading.timestamp, value))
                .map_err(|e| e.to_string())?;
        }
        let fired = self
            .rules
            .evaluate(device_id, reading.timestamp, series, &self.store)
            .map_err(|e| e.to_string())?;
        for n in fired {
            self.dispatcher.dispatch(n);
        }
        Ok(())
    }
}

impl ReadingSink for Ingestor {
    fn accept(&self, reading: SensorReading) -> Result<(), String> {
        let lock = self.device_lock(&reading.device_id);
        {
            let _guard = lock.lock().expect("device lock poisoned");
            self.store_and_evaluate(&reading.device_id, &reading, &reading.series())?;
        }
        let Some(online) = &self.online else { return Ok(()) };
        if !online.is_input_device(&reading.device_id) {
            return Ok(());
        }
        if let Some(f) = online.refresh(&self.store) {
            let device = online.output_device().to_owned();
            let lock = self.device_lock(&device);
            let _guard = lock.lock().expect("device lock poisoned");
            let pred = SensorReading {
                device_id: device.clone(),
                timestamp: f.timestamp,
                metrics: [(SOIL_MOISTURE_PRED.to_owned(), f.ensemble)].into_iter().collect(),
                link: None,
            };
            self.store_and_evaluate(&device, &pred, &[(SOIL_MOISTURE_PRED, f.ensemble)])?;
        }
        Ok(())
    }
}

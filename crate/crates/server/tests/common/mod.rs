//! Shared harness for the integration tests: a running API, an HTTP client,
//! a webhook receiver, a minimal MQTT broker and brute-force oracles.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration as StdDuration, Instant};

use serde_json::Value;
use wallet_server::api;
use wallet_server::app::App;
use wallet_server::auth::{Role, UserConfig};
use wallet_server::config::Config;
use wallet_server::notify::NotificationSink;

pub const ADMIN: &str = "tok-admin";
pub const CONTROLLER: &str = "tok-controller";
pub const VIEWER: &str = "tok-viewer";
pub const VIEWER2: &str = "tok-viewer-2";

pub fn users() -> Vec<UserConfig> {
    [
        ("ada", Role::Admin, ADMIN),
        ("cy", Role::Controller, CONTROLLER),
        ("vi", Role::Viewer, VIEWER),
        ("wu", Role::Viewer, VIEWER2),
    ]
    .into_iter()
    .map(|(id, role, token)| UserConfig {
        id: id.into(),
        name: id.to_uppercase(),
        role,
        token: token.into(),
    })
    .collect()
}

/// Config rooted in `dir`, no network ingest and no sinks.
pub fn test_config(dir: &std::path::Path) -> Config {
    let ui = dir.join("ui");
    std::fs::create_dir_all(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<!doctype html><title>wallet</title>").unwrap();
    let mut cfg = Config {
        data_dir: dir.join("data"),
        ui_dir: ui,
        users: users(),
        sinks: Vec::new(),
        ..Config::default()
    };
    cfg.ingest.tcp_port = None;
    cfg
}

pub struct TestServer {
    pub base: String,
    pub app: Arc<App>,
    rt: tokio::runtime::Runtime,
    pub dir: tempfile::TempDir,
}

impl TestServer {
    pub fn start() -> TestServer {
        TestServer::start_with(|_| {}, Vec::new())
    }

    pub fn start_with(tweak: impl FnOnce(&mut Config), sinks: Vec<Arc<dyn NotificationSink>>) -> TestServer {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = test_config(dir.path());
        tweak(&mut cfg);
        let app = Arc::new(App::with_sinks(cfg, sinks).unwrap());
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
        let std_listener = TcpListener::bind("127.0.0.1:0").unwrap();
        std_listener.set_nonblocking(true).unwrap();
        let addr = std_listener.local_addr().unwrap();
        let served = app.clone();
        rt.spawn(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener).unwrap();
            api::serve(served, listener, std::future::pending()).await.unwrap();
        });
        TestServer {
            base: format!("http://{addr}"),
            app,
            rt,
            dir,
        }
    }

    pub fn call(&self, method: &str, path: &str, token: Option<&str>, body: Option<Value>) -> (u16, Value) {
        call(&format!("{}{path}", self.base), method, token, body)
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        self.app.dispatcher.shutdown();
    }
}

/// One HTTP request; 4xx and 5xx come back as statuses, not errors.
pub fn call(url: &str, method: &str, token: Option<&str>, body: Option<Value>) -> (u16, Value) {
    let mut req = ureq::request(method, url).timeout(StdDuration::from_secs(30));
    if let Some(t) = token {
        req = req.set("Authorization", &format!("Bearer {t}"));
    }
    let result = match body {
        Some(b) => req.send_json(b),
        None => req.call(),
    };
    let resp = match result {
        Ok(r) => r,
        Err(ureq::Error::Status(_, r)) => r,
        Err(e) => panic!("{method} {url}: {e}"),
    };
    let status = resp.status();
    let text = resp.into_string().unwrap();
    let value = if text.is_empty() { Value::Null } else { serde_json::from_str(&text).unwrap_or(Value::String(text)) };
    (status, value)
}

/// An HTTP endpoint recording every POST body with its arrival time.
pub struct WebhookReceiver {
    pub url: String,
    pub received: Arc<Mutex<Vec<(Instant, Value)>>>,
    /// Requests still to answer with 500.
    pub fail_next: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
}

fn serve_http(stream: TcpStream, received: Arc<Mutex<Vec<(Instant, Value)>>>, fail_next: Arc<AtomicUsize>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let mut length = 0usize;
        loop {
            let mut h = String::new();
            if reader.read_line(&mut h).unwrap_or(0) == 0 {
                return;
            }
            let h = h.trim_end();
            if h.is_empty() {
                break;
            }
            if let Some((name, value)) = h.split_once(':') {
                if name.eq_ignore_ascii_case("content-length") {
                    length = value.trim().parse().unwrap();
                }
            }
        }
        let mut body = vec![0u8; length];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        let at = Instant::now();
        let failing = fail_next
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |n| n.checked_sub(1))
            .is_ok();
        let status = if failing {
            "500 Internal Server Error"
        } else {
            received.lock().unwrap().push((at, serde_json::from_slice(&body).unwrap_or(Value::Null)));
            "200 OK"
        };
        if write!(writer, "HTTP/1.1 {status}\r\nContent-Length: 0\r\n\r\n").is_err() {
            return;
        }
    }
}

impl WebhookReceiver {
    pub fn start() -> WebhookReceiver {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/hook", listener.local_addr().unwrap());
        listener.set_nonblocking(true).unwrap();
        let received = Arc::new(Mutex::new(Vec::new()));
        let fail_next = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let (r, f, s) = (received.clone(), fail_next.clone(), stop.clone());
        thread::spawn(move || {
            while !s.load(Ordering::Acquire) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        stream.set_nonblocking(false).unwrap();
                        stream.set_nodelay(true).unwrap();
                        let (r, f) = (r.clone(), f.clone());
                        thread::spawn(move || serve_http(stream, r, f));
                    }
                    Err(_) => thread::sleep(StdDuration::from_millis(2)),
                }
            }
        });
        WebhookReceiver {
            url,
            received,
            fail_next,
            stop,
        }
    }

    pub fn bodies(&self) -> Vec<Value> {
        self.received.lock().unwrap().iter().map(|(_, b)| b.clone()).collect()
    }

    pub fn wait_for(&self, n: usize, timeout: StdDuration) -> bool {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if self.received.lock().unwrap().len() >= n {
                return true;
            }
            thread::sleep(StdDuration::from_millis(5));
        }
        self.received.lock().unwrap().len() >= n
    }
}

impl Drop for WebhookReceiver {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
    }
}

/// MQTT 3.1.1 broker with just enough of the protocol for the service and
/// its tests: CONNECT, SUBSCRIBE, PUBLISH at QoS 0 and 1, PINGREQ and
/// DISCONNECT. Retained messages and sessions are not kept.
pub struct FakeBroker {
    pub addr: SocketAddr,
    /// Every PUBLISH received from any client, in arrival order.
    pub published: Arc<Mutex<Vec<(String, Vec<u8>)>>>,
    pub subscribed: Arc<AtomicUsize>,
}

type Subscribers = Arc<Mutex<Vec<(Vec<String>, Arc<Mutex<TcpStream>>)>>>;

fn filter_matches(filter: &str, topic: &str) -> bool {
    let f: Vec<&str> = filter.split('/').collect();
    let t: Vec<&str> = topic.split('/').collect();
    for (i, level) in f.iter().enumerate() {
        if *level == "#" {
            return true;
        }
        match t.get(i) {
            Some(x) if *level == "+" || level == x => {}
            _ => return false,
        }
    }
    f.len() == t.len()
}

fn read_packet(r: &mut impl Read) -> Option<(u8, Vec<u8>)> {
    let mut head = [0u8; 1];
    r.read_exact(&mut head).ok()?;
    let mut len = 0usize;
    let mut shift = 0;
    loop {
        let mut b = [0u8; 1];
        r.read_exact(&mut b).ok()?;
        len |= ((b[0] & 0x7f) as usize) << shift;
        if b[0] & 0x80 == 0 {
            break;
        }
        shift += 7;
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).ok()?;
    Some((head[0], body))
}

fn encode_len(mut n: usize, out: &mut Vec<u8>) {
    loop {
        let mut b = (n % 128) as u8;
        n /= 128;
        if n > 0 {
            b |= 0x80;
        }
        out.push(b);
        if n == 0 {
            break;
        }
    }
}

fn packet(head: u8, body: &[u8]) -> Vec<u8> {
    let mut out = vec![head];
    encode_len(body.len(), &mut out);
    out.extend_from_slice(body);
    out
}

fn mqtt_str(body: &[u8], at: usize) -> (String, usize) {
    let n = u16::from_be_bytes([body[at], body[at + 1]]) as usize;
    (String::from_utf8_lossy(&body[at + 2..at + 2 + n]).into_owned(), at + 2 + n)
}

fn broker_session(stream: TcpStream, subs: Subscribers, published: Arc<Mutex<Vec<(String, Vec<u8>)>>>, subscribed: Arc<AtomicUsize>) {
    let out = Arc::new(Mutex::new(stream.try_clone().unwrap()));
    let mut input = stream;
    let send = |bytes: &[u8]| {
        let _ = out.lock().unwrap().write_all(bytes);
    };
    while let Some((head, body)) = read_packet(&mut input) {
        match head >> 4 {
            1 => send(&[0x20, 0x02, 0x00, 0x00]),
            3 => {
                let qos = (head >> 1) & 0x03;
                let (topic, mut at) = mqtt_str(&body, 0);
                if qos > 0 {
                    let pid = [body[at], body[at + 1]];
                    at += 2;
                    send(&[0x40, 0x02, pid[0], pid[1]]);
                }
                let payload = body[at..].to_vec();
                published.lock().unwrap().push((topic.clone(), payload.clone()));
                let mut fwd = Vec::new();
                fwd.extend_from_slice(&(topic.len() as u16).to_be_bytes());
                fwd.extend_from_slice(topic.as_bytes());
                fwd.extend_from_slice(&payload);
                let frame = packet(0x30, &fwd);
                for (filters, conn) in subs.lock().unwrap().iter() {
                    if filters.iter().any(|f| filter_matches(f, &topic)) {
                        let _ = conn.lock().unwrap().write_all(&frame);
                    }
                }
            }
            8 => {
                let pid = [body[0], body[1]];
                let mut at = 2;
                let mut filters = Vec::new();
                let mut granted = Vec::new();
                while at < body.len() {
                    let (f, next) = mqtt_str(&body, at);
                    granted.push(body[next].min(1));
                    filters.push(f);
                    at = next + 1;
                }
                let mut ack = vec![pid[0], pid[1]];
                ack.extend_from_slice(&granted);
                send(&packet(0x90, &ack));
                subs.lock().unwrap().push((filters, out.clone()));
                subscribed.fetch_add(1, Ordering::AcqRel);
            }
            12 => send(&[0xd0, 0x00]),
            14 => break,
            _ => {}
        }
    }
    subs.lock().unwrap().retain(|(_, c)| !Arc::ptr_eq(c, &out));
}

impl FakeBroker {
    pub fn start() -> FakeBroker {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let published = Arc::new(Mutex::new(Vec::new()));
        let subscribed = Arc::new(AtomicUsize::new(0));
        let subs: Subscribers = Arc::new(Mutex::new(Vec::new()));
        let (p, s) = (published.clone(), subscribed.clone());
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let (subs, p, s) = (subs.clone(), p.clone(), s.clone());
                thread::spawn(move || broker_session(stream, subs, p, s));
            }
        });
        FakeBroker {
            addr,
            published,
            subscribed,
        }
    }

    pub fn url(&self) -> String {
        format!("mqtt://{}", self.addr)
    }

    pub fn wait_subscribed(&self, n: usize) {
        let deadline = Instant::now() + StdDuration::from_secs(10);
        while self.subscribed.load(Ordering::Acquire) < n {
            assert!(Instant::now() < deadline, "no subscriber arrived");
            thread::sleep(StdDuration::from_millis(10));
        }
    }

    /// Publishes one QoS 0 message as an ordinary client would.
    pub fn publish(&self, topic: &str, payload: &[u8]) {
        let mut s = TcpStream::connect(self.addr).unwrap();
        let mut connect = vec![0x00, 0x04, b'M', b'Q', b'T', b'T', 0x04, 0x02, 0x00, 0x3c];
        let id = b"test-pub";
        connect.extend_from_slice(&(id.len() as u16).to_be_bytes());
        connect.extend_from_slice(id);
        s.write_all(&packet(0x10, &connect)).unwrap();
        let mut ack = [0u8; 4];
        s.read_exact(&mut ack).unwrap();
        let mut body = Vec::new();
        body.extend_from_slice(&(topic.len() as u16).to_be_bytes());
        body.extend_from_slice(topic.as_bytes());
        body.extend_from_slice(payload);
        s.write_all(&packet(0x30, &body)).unwrap();
        s.write_all(&[0xe0, 0x00]).unwrap();
    }
}

/// One stored point in the brute-force rule oracle.
#[derive(Debug, Clone, Copy)]
pub struct OraclePoint {
    pub micros: i64,
    pub value: f64,
}

/// Independent recomputation of what the rules engine should fire.
///
/// Points live in a plain map (last write wins per timestamp). A cumulative
/// window at `now` holds every point with `now - period <= t <= now`.
#[derive(Debug, Default)]
pub struct RuleOracle {
    pub points: BTreeMap<i64, f64>,
    last_fired: Option<i64>,
    fired_on: Vec<i64>,
}

pub struct OracleRule {
    pub op: u8,
    pub threshold: f64,
    pub cumulative: bool,
    pub period_micros: i64,
    pub mean: bool,
    pub cooldown_micros: i64,
}

fn op_holds(op: u8, v: f64, threshold: f64) -> bool {
    match op {
        0 => v > threshold,
        1 => v < threshold,
        _ => (v - threshold).abs() <= 1e-6,
    }
}

impl RuleOracle {
    /// Stores the reading, then returns the value the rule fires with.
    pub fn feed(&mut self, rule: &OracleRule, micros: i64, value: f64) -> Option<f64> {
        self.points.insert(micros, value);
        if self.fired_on.contains(&micros) {
            return None;
        }
        if let Some(last) = self.last_fired {
            if rule.cooldown_micros > 0 && (micros - last).abs() < rule.cooldown_micros {
                return None;
            }
        }
        let observed = if rule.cumulative {
            let mut sum = 0.0;
            let mut n = 0usize;
            for (&t, &v) in &self.points {
                if t >= micros - rule.period_micros && t <= micros {
                    sum += v;
                    n += 1;
                }
            }
            if n == 0 {
                return None;
            }
            if rule.mean {
                sum / n as f64
            } else {
                sum
            }
        } else {
            value
        };
        if !op_holds(rule.op, observed, rule.threshold) {
            return None;
        }
        self.last_fired = Some(micros);
        self.fired_on.push(micros);
        Some(observed)
    }
}

/// One randomized rule scenario: a rule and a sequence of readings of its
/// series, in arbitrary timestamp order and with repeats.
#[derive(Debug, Clone)]
pub struct RuleCase {
    pub op: u8,
    pub threshold: f64,
    pub cumulative: bool,
    pub period_mins: i64,
    pub mean: bool,
    pub cooldown_mins: i64,
    pub readings: Vec<(i64, f64)>,
}

pub fn rule_case(cumulative: bool) -> impl proptest::strategy::Strategy<Value = RuleCase> {
    use proptest::prelude::*;
    // Half-unit values make equality and window boundaries reachable.
    let half = || (-20i32..=20).prop_map(|k| k as f64 * 0.5);
    (
        0u8..3,
        (-60i32..=60).prop_map(|k| k as f64 * 0.5),
        1i64..30,
        any::<bool>(),
        prop_oneof![Just(0i64), 1i64..20],
        proptest::collection::vec((0i64..90, half()), 1..40),
    )
        .prop_map(move |(op, threshold, period_mins, mean, cooldown_mins, readings)| RuleCase {
            op,
            threshold,
            cumulative,
            period_mins,
            mean,
            cooldown_mins,
            readings,
        })
}

/// Runs the case through the store and the rules engine, and compares every
/// firing with the oracle.
pub fn check_rule_case(case: &RuleCase) -> Result<(), String> {
    use wallet_core::reading::SeriesPoint;
    use wallet_core::Timestamp;
    use wallet_server::rules::{Aggregation, Operator, RuleEngine, RuleKind, RuleSpec};
    use wallet_store::{SeriesKey, Store, StoreOptions};

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = Store::open(dir.path(), StoreOptions::default()).map_err(|e| e.to_string())?;
    let engine = RuleEngine::in_memory();
    let spec = RuleSpec {
        device_id: "dev-1".into(),
        metric: "level".into(),
        kind: if case.cumulative { RuleKind::Cumulative } else { RuleKind::Instant },
        operator: [Operator::Greater, Operator::Less, Operator::Equal][case.op as usize],
        threshold: case.threshold,
        period_secs: case.cumulative.then_some(case.period_mins * 60),
        aggregation: if case.mean { Aggregation::Mean } else { Aggregation::Sum },
        cooldown_secs: case.cooldown_mins * 60,
        enabled: true,
    };
    let rule = engine.create("owner", spec).map_err(|e| e.to_string())?;
    let oracle_rule = OracleRule {
        op: case.op,
        threshold: case.threshold,
        cumulative: case.cumulative,
        period_micros: case.period_mins * 60_000_000,
        mean: case.mean,
        cooldown_micros: case.cooldown_mins * 60_000_000,
    };
    let mut oracle = RuleOracle::default();
    let key = SeriesKey::new("dev-1", "level").map_err(|e| e.to_string())?;
    for (step, &(minute, value)) in case.readings.iter().enumerate() {
        let t = Timestamp::from_secs(1_600_000_000 + minute * 60);
        store.append(&key, SeriesPoint::new(t, value)).map_err(|e| e.to_string())?;
        let fired = engine.evaluate("dev-1", t, &[("level", value)], &store).map_err(|e| e.to_string())?;
        let expected = oracle.feed(&oracle_rule, t.micros(), value);
        match (fired.as_slice(), expected) {
            ([], None) => {}
            ([n], Some(v)) => {
                if n.rule_id != rule.id || n.fired_at != t {
                    return Err(format!("step {step}: wrong notification {n:?}"));
                }
                if (n.value - v).abs() > 1e-9 * v.abs().max(1.0) {
                    return Err(format!("step {step}: fired with {} but the oracle says {v}", n.value));
                }
                if !op_holds(case.op, n.value, case.threshold) {
                    return Err(format!("step {step}: observed value {} breaks the predicate", n.value));
                }
            }
            (got, want) => return Err(format!("step {step}: engine fired {} times, oracle {:?}", got.len(), want)),
        }
    }
    Ok(())
}

/// One TTN-style uplink line carrying a single metric.
pub fn uplink_line(device: &str, secs: i64, metric: &str, value: f64) -> String {
    use wallet_core::uplink::{to_json, UplinkMessage};
    to_json(&UplinkMessage {
        app_id: "wallet".into(),
        dev_id: device.into(),
        port: 1,
        payload_fields: [(metric.to_owned(), value)].into_iter().collect(),
        received_at: wallet_core::Timestamp::from_secs(secs),
        gateways: Vec::new(),
    })
}

#[derive(Debug)]
pub struct LatencyReport {
    pub sent: usize,
    pub delivered_by_listener: u64,
    pub webhooks: usize,
    pub duplicates: usize,
    pub missing: usize,
    pub max_latency: StdDuration,
    pub over_budget: usize,
    pub elapsed: StdDuration,
}

/// Streams `rate * secs` uplinks over TCP at a steady rate into a service
/// whose only rule fires on every reading, and times each webhook against
/// the moment its line was written.
pub fn webhook_latency_run(rate: u32, secs: u64, budget: StdDuration) -> LatencyReport {
    use wallet_server::ingest::{run_listener, Source};
    use wallet_server::notify::WebhookSink;
    use wallet_server::rules::{Aggregation, Operator, RuleKind, RuleSpec};

    let hook = WebhookReceiver::start();
    let sink: Arc<dyn NotificationSink> = Arc::new(WebhookSink::new("hook", hook.url.clone()));
    let server = TestServer::start_with(|_| {}, vec![sink]);
    server
        .app
        .rules
        .create(
            "vi",
            RuleSpec {
                device_id: "soil-01".into(),
                metric: "soil_moisture".into(),
                kind: RuleKind::Instant,
                operator: Operator::Greater,
                threshold: 0.0,
                period_secs: None,
                aggregation: Aggregation::Sum,
                cooldown_secs: 0,
                enabled: true,
            },
        )
        .unwrap();
    let listener = run_listener(Source::Tcp("127.0.0.1:0".parse().unwrap()), server.app.ingestor.clone()).unwrap();
    let mut conn = TcpStream::connect(listener.local_addr().unwrap()).unwrap();
    conn.set_nodelay(true).unwrap();

    let n = (rate as u64 * secs) as usize;
    let gap = StdDuration::from_secs(1) / rate;
    let mut sent_at = Vec::with_capacity(n);
    let start = Instant::now();
    for i in 0..n {
        let due = start + gap * i as u32;
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            thread::sleep(wait);
        }
        let line = uplink_line("soil-01", 1_600_000_000 + 600 * i as i64, "soil_moisture", (i + 1) as f64);
        sent_at.push(Instant::now());
        conn.write_all(format!("{line}\n").as_bytes()).unwrap();
    }
    let elapsed = start.elapsed();
    hook.wait_for(n, StdDuration::from_secs(10));
    let got = hook.received.lock().unwrap().clone();
    let mut seen = vec![0usize; n];
    let mut max_latency = StdDuration::ZERO;
    let mut over_budget = 0;
    for (at, body) in &got {
        let idx = body["value"].as_f64().unwrap() as usize - 1;
        seen[idx] += 1;
        let lat = at.saturating_duration_since(sent_at[idx]);
        max_latency = max_latency.max(lat);
        if lat > budget {
            over_budget += 1;
        }
    }
    drop(conn);
    let delivered_by_listener = listener.stats().snapshot().delivered;
    listener.close();
    LatencyReport {
        sent: n,
        delivered_by_listener,
        webhooks: got.len(),
        duplicates: seen.iter().filter(|&&c| c > 1).count(),
        missing: seen.iter().filter(|&&c| c == 0).count(),
        max_latency,
        over_budget,
        elapsed,
    }
}

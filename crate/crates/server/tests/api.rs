//! HTTP API behaviour through a real listener.

mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;
use std::time::{Duration as StdDuration, Instant};

use common::{TestServer, ADMIN, CONTROLLER, VIEWER, VIEWER2};
use proptest::prelude::*;
use serde_json::{json, Value};
use wallet_core::reading::{SensorReading, SeriesPoint, SOIL_MOISTURE};
use wallet_core::sim::{generate_trace, pressure_csv, SimScenario};
use wallet_core::uplink::to_reading;
use wallet_core::Timestamp;
use wallet_server::ingest::ReadingSink;
use wallet_server::pipeline::simulate_uplinks;
use wallet_store::SeriesKey;

fn soil_sensor(id: &str) -> Value {
    json!({"device_id": id, "sensor_type": "capacitive", "metrics": [{"name": "soil_moisture", "unit": "counts"}], "location": "bed 3"})
}

fn reading(device: &str, secs: i64, metric: &str, value: f64) -> SensorReading {
    SensorReading {
        device_id: device.into(),
        timestamp: Timestamp::from_secs(secs),
        metrics: [(metric.to_owned(), value)].into_iter().collect(),
        link: None,
    }
}

fn instant_rule(threshold: f64) -> Value {
    json!({"device_id": "soil-01", "metric": "soil_moisture", "kind": "instant", "operator": "greater", "threshold": threshold})
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum Allowed {
    All,
    ControllerUp,
    AdminOnly,
}

/// The documented role matrix, restated independently of the server's table.
fn endpoints() -> Vec<(&'static str, &'static str, Option<Value>, Allowed)> {
    use Allowed::*;
    vec![
        ("GET", "/api/me", None, All),
        ("GET", "/api/sensors", None, All),
        ("POST", "/api/sensors", Some(soil_sensor("soil-09")), AdminOnly),
        ("GET", "/api/sensors/soil-01/readings", None, All),
        ("GET", "/api/sensors/soil-01/downlink", None, All),
        ("POST", "/api/sensors/soil-01/downlink", Some(json!({"kind": "set_wakeup_period", "minutes": 20})), ControllerUp),
        ("GET", "/api/sensors/soil-01/forecast?steps=1", None, All),
        ("GET", "/api/rules", None, All),
        ("POST", "/api/rules", Some(instant_rule(40.0)), All),
        ("PUT", "/api/rules/999", Some(instant_rule(41.0)), All),
        ("DELETE", "/api/rules/999", None, All),
        ("GET", "/api/notifications", None, All),
        ("GET", "/api/models", None, All),
        ("POST", "/api/models/train", Some(json!({"epochs": 1})), AdminOnly),
    ]
}

#[test]
fn authorization_matrix_is_enforced_for_every_endpoint_and_role() {
    let s = TestServer::start();
    let (st, _) = s.call("POST", "/api/sensors", Some(ADMIN), Some(soil_sensor("soil-01")));
    assert_eq!(st, 201);
    let roles = [(VIEWER, "viewer"), (CONTROLLER, "controller"), (ADMIN, "admin")];
    for (method, path, body, allowed) in endpoints() {
        for bad in [None, Some("not-a-token")] {
            let (st, b) = s.call(method, path, bad, body.clone());
            assert_eq!(st, 401, "{method} {path} with {bad:?}");
            assert_eq!(b["error"]["code"], "unauthorized");
        }
        for (token, role) in roles {
            let permitted = match allowed {
                Allowed::All => true,
                Allowed::ControllerUp => role != "viewer",
                Allowed::AdminOnly => role == "admin",
            };
            let (st, b) = s.call(method, path, Some(token), body.clone());
            if permitted {
                assert!(st != 401 && st != 403, "{method} {path} as {role}: {st} {b}");
            } else {
                assert_eq!(st, 403, "{method} {path} as {role}: {b}");
                assert_eq!(b["error"]["code"], "forbidden");
            }
            assert!(!b.to_string().contains("tok-"), "{method} {path} leaked a token: {b}");
        }
    }
}

#[test]
fn public_endpoints_need_no_token() {
    let s = TestServer::start();
    let (st, meta) = s.call("GET", "/api/meta", None, None);
    assert_eq!(st, 200);
    assert_eq!(meta["cadence_mins"], 10);
    assert_eq!(meta["roles"], json!(["viewer", "controller", "admin"]));
    assert_eq!(s.call("GET", "/healthz", None, None).0, 200);
    let html = ureq::get(&format!("{}/ui/", s.base)).call().unwrap().into_string().unwrap();
    assert!(html.contains("<title>wallet</title>"));
    let (st, me) = s.call("GET", "/api/me", Some(CONTROLLER), None);
    assert_eq!(st, 200);
    assert_eq!(me, json!({"id": "cy", "name": "CY", "role": "controller"}));
}

#[test]
fn sensor_registration_statuses() {
    let s = TestServer::start();
    let (st, d) = s.call("POST", "/api/sensors", Some(ADMIN), Some(soil_sensor("soil-01")));
    assert_eq!(st, 201);
    assert_eq!(d["registered_by"], "ada");
    assert_eq!(s.call("POST", "/api/sensors", Some(ADMIN), Some(soil_sensor("soil-01"))).0, 409);
    assert_eq!(s.call("POST", "/api/sensors", Some(CONTROLLER), Some(soil_sensor("soil-02"))).0, 403);
    assert_eq!(s.call("POST", "/api/sensors", Some(ADMIN), Some(json!({"device_id": "x"}))).0, 422);
    assert_eq!(s.call("POST", "/api/sensors", Some(ADMIN), Some(soil_sensor("bad id"))).0, 422);

    s.app.ingestor.accept(reading("stray-7", 0, SOIL_MOISTURE, 1.0)).unwrap();
    let (_, list) = s.call("GET", "/api/sensors", Some(VIEWER), None);
    assert_eq!(list["sensors"].as_array().unwrap().len(), 1);
    assert_eq!(list["unregistered"], json!(["stray-7"]));
}

#[test]
fn readings_page_in_order_and_reject_bad_ranges() {
    let s = TestServer::start();
    for k in 0..3 {
        s.app.ingestor.accept(reading("soil-01", 600 * k, SOIL_MOISTURE, k as f64)).unwrap();
    }
    let (st, page) = s.call("GET", "/api/sensors/soil-01/readings?limit=2", Some(VIEWER), None);
    assert_eq!(st, 200);
    assert_eq!(page["points"].as_array().unwrap().len(), 2);
    assert_eq!(page["registered"], false);
    let next = page["next"].as_str().unwrap().to_owned();
    let (_, rest) = s.call("GET", &format!("/api/sensors/soil-01/readings?limit=2&cursor={next}"), Some(VIEWER), None);
    assert_eq!(rest["points"].as_array().unwrap().len(), 1);
    assert_eq!(rest["points"][0]["value"], 2.0);
    assert!(rest["next"].is_null());

    let (st, e) = s.call(
        "GET",
        "/api/sensors/soil-01/readings?from=2020-01-02T00:00:00Z&to=2020-01-01T00:00:00Z",
        Some(VIEWER),
        None,
    );
    assert_eq!((st, e["error"]["code"].as_str()), (400, Some("invalid_range")));
    assert_eq!(s.call("GET", "/api/sensors/nope/readings", Some(VIEWER), None).0, 404);
    assert_eq!(s.call("GET", "/api/sensors/soil-01/readings?from=yesterday", Some(VIEWER), None).0, 400);
}

fn shared_server() -> &'static TestServer {
    static S: OnceLock<TestServer> = OnceLock::new();
    S.get_or_init(TestServer::start)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn pagination_union_equals_the_unpaginated_query(
        secs in proptest::collection::vec(0i64..5000, 0..60),
        limit in 1usize..12,
        from in 0i64..2500,
        span in 0i64..5000,
    ) {
        static NEXT: AtomicUsize = AtomicUsize::new(0);
        let s = shared_server();
        let device = format!("page-{}", NEXT.fetch_add(1, Ordering::Relaxed));
        let key = SeriesKey::new(device.as_str(), SOIL_MOISTURE).unwrap();
        for (i, &t) in secs.iter().enumerate() {
            s.app.store.append(&key, SeriesPoint::new(Timestamp::from_secs(t), i as f64)).unwrap();
        }
        s.app.store.append(&key, SeriesPoint::new(Timestamp::from_secs(99_999), -1.0)).unwrap();
        let (from, to) = (Timestamp::from_secs(from), Timestamp::from_secs(from + span));
        let expected = s.app.store.query(&key, from, to).unwrap();
        let base = format!(
            "/api/sensors/{device}/readings?limit={limit}&from={}&to={}",
            from.to_rfc3339(),
            to.to_rfc3339()
        );
        let mut got = Vec::new();
        let mut cursor: Option<String> = None;
        loop {
            let path = match &cursor {
                Some(c) => format!("{base}&cursor={c}"),
                None => base.clone(),
            };
            let (st, page) = s.call("GET", &path, Some(VIEWER), None);
            prop_assert_eq!(st, 200);
            let points: Vec<SeriesPoint> = serde_json::from_value(page["points"].clone()).unwrap();
            prop_assert!(points.len() <= limit);
            got.extend(points);
            match page["next"].as_str() {
                Some(n) => cursor = Some(n.to_owned()),
                None => break,
            }
        }
        prop_assert_eq!(got, expected);
    }
}

#[test]
fn rule_lifecycle_respects_ownership() {
    let s = TestServer::start();
    let (st, rule) = s.call("POST", "/api/rules", Some(VIEWER), Some(instant_rule(40.0)));
    assert_eq!(st, 201);
    assert_eq!(rule["owner"], "vi");
    let id = rule["id"].as_u64().unwrap();
    let path = format!("/api/rules/{id}");

    assert_eq!(s.call("GET", "/api/rules", Some(VIEWER2), None).1["rules"], json!([]));
    assert_eq!(s.call("GET", "/api/rules", Some(ADMIN), None).1["rules"].as_array().unwrap().len(), 1);
    assert_eq!(s.call("PUT", &path, Some(VIEWER2), Some(instant_rule(1.0))).0, 403);
    assert_eq!(s.call("DELETE", &path, Some(VIEWER2), None).0, 403);

    let (st, updated) = s.call("PUT", &path, Some(VIEWER), Some(instant_rule(50.0)));
    assert_eq!(st, 200);
    assert_eq!(updated["threshold"], 50.0);

    // The rule takes effect on the next reading.
    s.app.ingestor.accept(reading("soil-01", 0, SOIL_MOISTURE, 49.0)).unwrap();
    s.app.ingestor.accept(reading("soil-01", 600, SOIL_MOISTURE, 51.0)).unwrap();
    let (_, mine) = s.call("GET", "/api/notifications", Some(VIEWER), None);
    let mine = mine["notifications"].as_array().unwrap().clone();
    assert_eq!(mine.len(), 1);
    assert_eq!(mine[0]["value"], 51.0);
    assert_eq!(s.call("GET", "/api/notifications", Some(VIEWER2), None).1["notifications"], json!([]));
    assert_eq!(s.call("GET", "/api/notifications", Some(ADMIN), None).1["notifications"].as_array().unwrap().len(), 1);

    assert_eq!(s.call("DELETE", &path, Some(ADMIN), None).0, 204);
    assert_eq!(s.call("DELETE", &path, Some(VIEWER), None).0, 404);
    s.app.ingestor.accept(reading("soil-01", 1200, SOIL_MOISTURE, 99.0)).unwrap();
    assert_eq!(s.call("GET", "/api/notifications", Some(ADMIN), None).1["notifications"].as_array().unwrap().len(), 1);
}

#[test]
fn rule_validation_is_422_with_the_field() {
    let s = TestServer::start();
    let bad = [
        json!({"device_id": "soil-01", "metric": "soil_moisture", "kind": "cumulative", "operator": "greater", "threshold": 4, "period_secs": 0}),
        json!({"device_id": "soil-01", "metric": "soil_moisture", "kind": "cumulative", "operator": "greater", "threshold": 4}),
        json!({"device_id": "soil-01", "metric": "soil_moisture", "kind": "instant", "operator": "around", "threshold": 4}),
        json!({"device_id": "soil-01", "metric": "soil_moisture", "kind": "instant", "operator": "less", "threshold": 4, "cooldown_secs": -1}),
    ];
    for body in bad {
        let (st, e) = s.call("POST", "/api/rules", Some(VIEWER), Some(body.clone()));
        assert_eq!(st, 422, "{body}");
        assert_eq!(e["error"]["code"], "validation");
    }
    let (_, e) = s.call("POST", "/api/rules", Some(VIEWER), Some(json!({"device_id": "soil-01", "metric": "soil_moisture", "kind": "cumulative", "operator": ">", "threshold": 4, "period_secs": 0})));
    assert!(e["error"]["message"].as_str().unwrap().starts_with("period_secs"));
}

#[test]
fn downlinks_move_from_pending_to_sent_to_acked() {
    use wallet_core::sim::DownlinkSource;
    use wallet_server::downlink::SimLink;

    let s = TestServer::start();
    let path = "/api/sensors/soil-01/downlink";
    assert_eq!(s.call("POST", path, Some(CONTROLLER), Some(json!({"kind": "set_wakeup_period", "minutes": 20}))).0, 404);
    s.call("POST", "/api/sensors", Some(ADMIN), Some(soil_sensor("soil-01")));

    let (st, cmd) = s.call("POST", path, Some(CONTROLLER), Some(json!({"kind": "set_wakeup_period", "minutes": 20})));
    assert_eq!(st, 201);
    assert_eq!(cmd["state"], "pending");
    assert_eq!(cmd["payload"], "AQAU");
    assert_eq!(s.call("POST", path, Some(VIEWER), Some(json!({"kind": "time_sync", "offset_secs": -5}))).0, 403);

    let big = base64_of(&[7u8; 60]);
    let (st, e) = s.call("POST", path, Some(ADMIN), Some(json!({"kind": "raw", "payload": big})));
    assert_eq!((st, e["error"]["code"].as_str()), (413, Some("payload_too_large")));
    assert_eq!(s.call("POST", path, Some(ADMIN), Some(json!({"kind": "set_wakeup_period", "minutes": 0}))).0, 422);
    assert_eq!(s.call("POST", path, Some(ADMIN), Some(json!({"kind": "reboot"}))).0, 422);
    assert_eq!(s.call("POST", path, Some(ADMIN), Some(json!({"kind": "time_sync", "payload": base64_of(&[1, 0, 20])}))).0, 422);

    assert_eq!(s.app.downlinks.worker_pass(s.app.sim_outbox.as_ref(), Timestamp::now()), 1);
    let (_, list) = s.call("GET", path, Some(VIEWER), None);
    assert_eq!(list["commands"][0]["state"], "sent");

    let mut link = SimLink::new(s.app.sim_outbox.clone(), s.app.downlinks.clone());
    let delivered = link.poll("soil-01", Timestamp::from_secs(60));
    assert_eq!(delivered.len(), 1);
    link.ack(delivered[0].id, true);
    let (_, list) = s.call("GET", path, Some(VIEWER), None);
    assert_eq!(list["commands"][0]["state"], "acked");
}

fn base64_of(bytes: &[u8]) -> String {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn ingest_trace(s: &TestServer, steps: i64) {
    let scenario = SimScenario {
        duration_mins: steps * 10,
        ..Default::default()
    };
    let (lines, _) = simulate_uplinks(&scenario).unwrap();
    for l in lines {
        s.app.ingestor.accept(to_reading(&wallet_core::uplink::parse_uplink(&l).unwrap())).unwrap();
    }
    let pressure = pressure_csv(&generate_trace(&scenario).unwrap());
    let key = SeriesKey::new("weather-01", "air_pressure").unwrap();
    s.app.store.import_csv(&key, &pressure).unwrap();
}

#[test]
fn forecasts_need_a_model_and_history() {
    let s = TestServer::start();
    s.call("POST", "/api/sensors", Some(ADMIN), Some(soil_sensor("soil-01")));
    let (st, e) = s.call("GET", "/api/sensors/soil-01/forecast", Some(VIEWER), None);
    assert_eq!((st, e["error"]["code"].as_str()), (409, Some("no_model")));

    ingest_trace(&s, 300);
    let (st, job) = s.call("POST", "/api/models/train", Some(ADMIN), Some(json!({"epochs": 2, "seed": 5})));
    assert_eq!(st, 202, "{job}");
    assert_eq!(job["job"]["state"], "running");
    let deadline = Instant::now() + StdDuration::from_secs(300);
    let models = loop {
        let (_, m) = s.call("GET", "/api/models", Some(VIEWER), None);
        match m["job"]["state"].as_str() {
            Some("done") => break m,
            Some("failed") => panic!("training failed: {m}"),
            _ => assert!(Instant::now() < deadline, "training did not finish"),
        }
        std::thread::sleep(StdDuration::from_millis(100));
    };
    assert_eq!(models["current"], "v1");
    assert_eq!(models["versions"][0]["config"]["seed"], 5);

    let (st, f) = s.call("GET", "/api/sensors/soil-01/forecast?steps=6", Some(VIEWER), None);
    assert_eq!(st, 200, "{f}");
    let results = f["results"].as_array().unwrap();
    assert_eq!(results.len(), 6);
    let times: Vec<Timestamp> = results.iter().map(|r| serde_json::from_value(r["timestamp"].clone()).unwrap()).collect();
    assert!(times.windows(2).all(|w| w[1].since(w[0]).as_secs_f64() == 600.0));
    for r in results {
        let (a, b, e) = (r["ffnn_pred"].as_f64().unwrap(), r["lstm_pred"].as_f64().unwrap(), r["ensemble"].as_f64().unwrap());
        assert!(a.min(b) <= e && e <= a.max(b));
        assert_eq!(r["model_version"], "v1");
    }
    assert_eq!(s.call("GET", "/api/sensors/soil-01/forecast?steps=0", Some(VIEWER), None).0, 400);
    assert_eq!(s.call("GET", "/api/sensors/weather-01/forecast", Some(VIEWER), None).0, 422);

    // A soil reading far past the weather data leaves no complete rows.
    s.app.ingestor.accept(reading("soil-01", 4_000_000_000, SOIL_MOISTURE, 300.0)).unwrap();
    let (st, e) = s.call("GET", "/api/sensors/soil-01/forecast", Some(VIEWER), None);
    assert_eq!((st, e["error"]["code"].as_str()), (409, Some("insufficient_history")));
}

#[test]
fn a_second_training_request_waits_for_the_first() {
    let s = TestServer::start();
    ingest_trace(&s, 300);
    let (st, _) = s.call("POST", "/api/models/train", Some(ADMIN), Some(json!({"epochs": 30})));
    assert_eq!(st, 202);
    let (st, e) = s.call("POST", "/api/models/train", Some(ADMIN), Some(json!({"epochs": 1})));
    assert_eq!((st, e["error"]["code"].as_str()), (409, Some("busy")));
    assert_eq!(s.call("POST", "/api/models/train", Some(ADMIN), Some(json!({"epochs": 0}))).0, 422);
}

//! TTN v2 style uplink JSON.
//!
//! ```json
//! {"app_id":"w","dev_id":"soil-01","port":1,
//!  "payload_fields":{"soil_moisture":312.0},
//!  "metadata":{"time":"2020-02-15T10:00:00Z",
//!              "gateways":[{"gtw_id":"g1","rssi":-97,"snr":7.5}]}}
//! ```
//!
//! `app_id` may be absent (empty string), `metadata.gateways` may be absent
//! or empty. Unknown fields are ignored.

use std::collections::BTreeMap;

use serde_json::{json, Map, Value};

use crate::reading::{is_valid_device_id, is_valid_metric, Link, SensorReading, RSSI, RSSI_RANGE, SNR, SNR_RANGE};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum UplinkError {
    #[error("malformed json: {0}")]
    MalformedJson(String),
    #[error("missing field {0}")]
    MissingField(&'static str),
    #[error("bad timestamp {0:?}")]
    BadTimestamp(String),
    #[error("invalid field {field}: {reason}")]
    InvalidField { field: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gateway {
    pub gateway_id: String,
    pub rssi: i32,
    pub snr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UplinkMessage {
    pub app_id: String,
    pub dev_id: String,
    pub port: u8,
    pub payload_fields: BTreeMap<String, f64>,
    pub received_at: Timestamp,
    pub gateways: Vec<Gateway>,
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> UplinkError {
    UplinkError::InvalidField {
        field: field.into(),
        reason: reason.into(),
    }
}

fn string_field(obj: &Map<String, Value>, name: &'static str) -> Result<Option<String>, UplinkError> {
    match obj.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(invalid(name, "expected a string")),
    }
}

pub fn parse_uplink(raw: &str) -> Result<UplinkMessage, UplinkError> {
    let value: Value = serde_json::from_str(raw).map_err(|e| UplinkError::MalformedJson(e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(UplinkError::MalformedJson("expected a JSON object".into()));
    };

    let dev_id = string_field(&obj, "dev_id")?.ok_or(UplinkError::MissingField("dev_id"))?;
    if !is_valid_device_id(&dev_id) {
        return Err(invalid("dev_id", "must be 1-64 characters of [A-Za-z0-9_.-]"));
    }
    let app_id = string_field(&obj, "app_id")?.unwrap_or_default();

    let fields = match obj.get("payload_fields") {
        None | Some(Value::Null) => return Err(UplinkError::MissingField("payload_fields")),
        Some(Value::Object(m)) => m,
        Some(_) => return Err(invalid("payload_fields", "expected an object")),
    };
    if fields.is_empty() {
        return Err(invalid("payload_fields", "no metrics"));
    }
    let mut payload_fields = BTreeMap::new();
    for (k, v) in fields {
        if !is_valid_metric(k) || k == RSSI || k == SNR {
            return Err(invalid(format!("payload_fields.{k}"), "not a valid metric name"));
        }
        match v.as_f64() {
            Some(x) if x.is_finite() => {
                payload_fields.insert(k.clone(), x);
            }
            _ => return Err(invalid(format!("payload_fields.{k}"), "expected a finite number")),
        }
    }

    let port = match obj.get("port") {
        None | Some(Value::Null) => return Err(UplinkError::MissingField("port")),
        Some(v) => v
            .as_u64()
            .and_then(|p| u8::try_from(p).ok())
            .ok_or_else(|| invalid("port", "expected an integer in 0..=255"))?,
    };

    let meta = match obj.get("metadata") {
        Some(Value::Object(m)) => m,
        None | Some(Value::Null) => return Err(UplinkError::MissingField("metadata.time")),
        Some(_) => return Err(invalid("metadata", "expected an object")),
    };
    let time = match meta.get("time") {
        Some(Value::String(s)) => s,
        None | Some(Value::Null) => return Err(UplinkError::MissingField("metadata.time")),
        Some(other) => return Err(UplinkError::BadTimestamp(other.to_string())),
    };
    let received_at = Timestamp::parse_rfc3339(time).map_err(|_| UplinkError::BadTimestamp(time.clone()))?;

    let gateways = match meta.get("gateways") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(list)) => list
            .iter()
            .enumerate()
            .map(|(i, g)| parse_gateway(i, g))
            .collect::<Result<_, _>>()?,
        Some(_) => return Err(invalid("metadata.gateways", "expected an array")),
    };

    Ok(UplinkMessage {
        app_id,
        dev_id,
        port,
        payload_fields,
        received_at,
        gateways,
    })
}

fn parse_gateway(i: usize, g: &Value) -> Result<Gateway, UplinkError> {
    let field = |name: &str| format!("metadata.gateways[{i}].{name}");
    let obj = g.as_object().ok_or_else(|| invalid(format!("metadata.gateways[{i}]"), "expected an object"))?;
    let gateway_id = match obj.get("gtw_id") {
        Some(Value::String(s)) => s.clone(),
        None | Some(Value::Null) => String::new(),
        Some(_) => return Err(invalid(field("gtw_id"), "expected a string")),
    };
    let rssi = obj
        .get("rssi")
        .and_then(Value::as_i64)
        .ok_or_else(|| invalid(field("rssi"), "expected an integer"))?;
    let snr = obj
        .get("snr")
        .and_then(Value::as_f64)
        .ok_or_else(|| invalid(field("snr"), "expected a number"))?;
    let link = Link { rssi: rssi as f64, snr };
    if !link.in_range() {
        return Err(invalid(
            field("rssi"),
            format!("link out of range (rssi {rssi} not in {RSSI_RANGE:?} or snr {snr} not in {SNR_RANGE:?})"),
        ));
    }
    Ok(Gateway {
        gateway_id,
        rssi: rssi as i32,
        snr,
    })
}

pub fn to_json(msg: &UplinkMessage) -> String {
    let gateways: Vec<Value> = msg
        .gateways
        .iter()
        .map(|g| json!({"gtw_id": g.gateway_id, "rssi": g.rssi, "snr": g.snr}))
        .collect();
    json!({
        "app_id": msg.app_id,
        "dev_id": msg.dev_id,
        "port": msg.port,
        "payload_fields": msg.payload_fields,
        "metadata": {"time": msg.received_at.to_rfc3339(), "gateways": gateways},
    })
    .to_string()
}

/// Link metrics come from the strongest gateway; the first one wins a tie.
pub fn to_reading(msg: &UplinkMessage) -> SensorReading {
    let mut best: Option<&Gateway> = None;
    for g in &msg.gateways {
        if best.map_or(true, |b| g.rssi > b.rssi) {
            best = Some(g);
        }
    }
    SensorReading {
        device_id: msg.dev_id.clone(),
        timestamp: msg.received_at,
        metrics: msg.payload_fields.clone(),
        link: best.map(|g| Link {
            rssi: g.rssi as f64,
            snr: g.snr,
        }),
    }
}

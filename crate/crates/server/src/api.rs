//! HTTP JSON API.

use std::collections::BTreeSet;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::services::ServeDir;
use wallet_core::downlink::{DeviceCommand, DownlinkError, DownlinkKind};
use wallet_core::features::{FEATURE_NAMES, TARGET_NAME};
use wallet_core::forecaster::{ForecastError, TrainConfig};
use wallet_core::reading::{SOIL_MOISTURE, SOIL_MOISTURE_PRED};
use wallet_core::Timestamp;
use wallet_store::{SeriesKey, StoreError};

use crate::app::{App, TrainJob};
use crate::auth::{allowed, Endpoint, Role, User, ROLES};
use crate::downlink::QueueError;
use crate::online::{forecast_from_store, ServeError};
use crate::rules::{RuleError, RuleSpec};
use crate::sensors::{NewSensor, SensorError};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> ApiError {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn bad_request(message: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn forbidden() -> ApiError {
        ApiError::new(StatusCode::FORBIDDEN, "forbidden", "your role may not do this")
    }

    fn internal(e: impl std::fmt::Display) -> ApiError {
        log::error!("internal error: {e}");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": {"code": self.code, "message": self.message}}))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::InvalidRange { .. } => ApiError::new(StatusCode::BAD_REQUEST, "invalid_range", e.to_string()),
            StoreError::InvalidKey(_) => ApiError::bad_request(e.to_string()),
            other => ApiError::internal(other),
        }
    }
}

impl From<ServeError> for ApiError {
    fn from(e: ServeError) -> Self {
        match e {
            ServeError::Forecast(ForecastError::NoModel) => ApiError::new(StatusCode::CONFLICT, "no_model", "no trained model is published"),
            ServeError::Forecast(e @ ForecastError::InsufficientHistory { .. }) => {
                ApiError::new(StatusCode::CONFLICT, "insufficient_history", e.to_string())
            }
            ServeError::Forecast(e @ ForecastError::InvalidConfig(_)) => ApiError::bad_request(e.to_string()),
            other => ApiError::internal(other),
        }
    }
}

impl From<RuleError> for ApiError {
    fn from(e: RuleError) -> Self {
        match e {
            RuleError::Validation { .. } => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", e.to_string()),
            RuleError::NotFound(_) => ApiError::not_found(e.to_string()),
        }
    }
}

impl From<QueueError> for ApiError {
    fn from(e: QueueError) -> Self {
        match e {
            QueueError::Command(DownlinkError::PayloadTooLarge(_)) => {
                ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", e.to_string())
            }
            QueueError::Command(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", e.to_string()),
            QueueError::NotFound(_) => ApiError::not_found(e.to_string()),
            QueueError::Storage(_) => ApiError::internal(e),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = Arc<App>;

/// Resolves the bearer token and checks the endpoint against the matrix.
fn authorize(app: &App, headers: &HeaderMap, endpoint: Endpoint) -> ApiResult<User> {
    let token = headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing bearer token"))?;
    let user = app
        .users
        .authenticate(token.trim())
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "unknown token"))?;
    if !allowed(endpoint, user.role) {
        return Err(ApiError::forbidden());
    }
    Ok(user.clone())
}

/// `Json` extraction with errors in the API's own shape.
fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", e.to_string()))
}

pub fn router(app: Shared) -> Router {
    let ui = ServeDir::new(&app.config.ui_dir).append_index_html_on_directories(true);
    Router::new()
        .route("/healthz", get(healthz))
        .route("/api/meta", get(meta))
        .route("/api/me", get(me))
        .route("/api/sensors", get(list_sensors).post(register_sensor))
        .route("/api/sensors/:id/readings", get(readings))
        .route("/api/sensors/:id/downlink", get(list_downlinks).post(enqueue_downlink))
        .route("/api/sensors/:id/forecast", get(forecast))
        .route("/api/rules", get(list_rules).post(create_rule))
        .route("/api/rules/:id", put(update_rule).delete(delete_rule))
        .route("/api/notifications", get(notifications))
        .route("/api/models", get(list_models))
        .route("/api/models/train", post(train_model))
        .nest_service("/ui", ui)
        .with_state(app)
}

async fn healthz(State(app): State<Shared>) -> Json<Value> {
    Json(json!({"status": "ok", "series": app.store.keys().len()}))
}

async fn meta(State(app): State<Shared>) -> Json<Value> {
    let d = &app.config.dataset;
    Json(json!({
        "service": "wallet",
        "version": env!("CARGO_PKG_VERSION"),
        "cadence_mins": app.config.train.cadence_mins,
        "features": FEATURE_NAMES,
        "target": TARGET_NAME,
        "forecast_metric": SOIL_MOISTURE_PRED,
        "metrics": {
            "soil_moisture": "counts",
            "air_temperature": "°C",
            "air_humidity": "%RH",
            "air_pressure": "hPa",
            "rssi": "dBm",
            "snr": "dB",
            "soil_moisture_pred": "counts",
        },
        "roles": ROLES,
        "dataset": {"soil_device": d.soil_device, "weather_device": d.weather_device, "pressure_device": d.pressure_device},
        "downlink_kinds": ["set_wakeup_period", "time_sync", "raw"],
        "max_downlink_payload": wallet_core::downlink::MAX_PAYLOAD,
    }))
}

async fn me(State(app): State<Shared>, headers: HeaderMap) -> ApiResult<Json<User>> {
    Ok(Json(authorize(&app, &headers, Endpoint::Me)?))
}

async fn list_sensors(State(app): State<Shared>, headers: HeaderMap) -> ApiResult<Json<Value>> {
    authorize(&app, &headers, Endpoint::ListSensors)?;
    let sensors = app.sensors.list();
    let unregistered: BTreeSet<String> = app
        .store
        .keys()
        .into_iter()
        .map(|k| k.device_id)
        .filter(|d| !app.sensors.is_registered(d))
        .collect();
    Ok(Json(json!({"sensors": sensors, "unregistered": unregistered})))
}

async fn register_sensor(State(app): State<Shared>, headers: HeaderMap, body: axum::body::Bytes) -> ApiResult<Response> {
    let user = authorize(&app, &headers, Endpoint::RegisterSensor)?;
    let new: NewSensor = parse_body(&body)?;
    match app.sensors.register(new, &user.id, Timestamp::now()) {
        Ok(d) => Ok((StatusCode::CREATED, Json(d)).into_response()),
        Err(e @ SensorError::Conflict(_)) => Err(ApiError::new(StatusCode::CONFLICT, "conflict", e.to_string())),
        Err(e @ SensorError::Invalid(_)) => Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", e.to_string())),
        Err(e) => Err(ApiError::internal(e)),
    }
}

fn known_device(app: &App, device_id: &str) -> ApiResult<bool> {
    let registered = app.sensors.is_registered(device_id);
    if registered || app.store.keys().iter().any(|k| k.device_id == device_id) {
        Ok(registered)
    } else {
        Err(ApiError::not_found(format!("device {device_id} is unknown")))
    }
}

fn parse_time(s: &Option<String>, default: Timestamp, field: &str) -> ApiResult<Timestamp> {
    match s {
        None => Ok(default),
        Some(s) => Timestamp::parse_rfc3339(s).map_err(|_| ApiError::bad_request(format!("{field}: not an RFC 3339 timestamp"))),
    }
}

#[derive(Deserialize)]
struct ReadingsQuery {
    metric: Option<String>,
    from: Option<String>,
    to: Option<String>,
    limit: Option<usize>,
    cursor: Option<String>,
}

pub const DEFAULT_PAGE: usize = 500;
pub const MAX_PAGE: usize = 10_000;

async fn readings(
    State(app): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<ReadingsQuery>,
) -> ApiResult<Json<Value>> {
    authorize(&app, &headers, Endpoint::GetReadings)?;
    let registered = known_device(&app, &id)?;
    let metric = q.metric.unwrap_or_else(|| SOIL_MOISTURE.to_owned());
    let key = SeriesKey::new(id.as_str(), metric.as_str())?;
    let from = parse_time(&q.from, Timestamp::MIN, "from")?;
    let to = parse_time(&q.to, Timestamp::MAX, "to")?;
    if from > to {
        return Err(StoreError::InvalidRange { from, to }.into());
    }
    // The cursor is the first timestamp of the next page, in microseconds.
    let start = match &q.cursor {
        None => from,
        Some(c) => {
            let micros: i64 = c.parse().map_err(|_| ApiError::bad_request("cursor: malformed"))?;
            Timestamp::from_micros(micros).max(from).min(to)
        }
    };
    let limit = q.limit.unwrap_or(DEFAULT_PAGE).clamp(1, MAX_PAGE);
    let mut points = app.store.query(&key, start, to)?;
    let next = points.get(limit).map(|p| p.timestamp.micros().to_string());
    points.truncate(limit);
    Ok(Json(json!({
        "device_id": id,
        "metric": metric,
        "registered": registered,
        "points": points,
        "next": next,
    })))
}

async fn list_downlinks(State(app): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    authorize(&app, &headers, Endpoint::ListDownlinks)?;
    Ok(Json(json!({"device_id": id, "commands": app.downlinks.list(&id)})))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DownlinkRequest {
    kind: String,
    #[serde(default = "default_port")]
    port: u8,
    minutes: Option<u16>,
    offset_secs: Option<i32>,
    /// Base64 bytes; overrides the kind's parameters.
    payload: Option<String>,
}

fn default_port() -> u8 {
    1
}

async fn enqueue_downlink(
    State(app): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> ApiResult<Response> {
    authorize(&app, &headers, Endpoint::EnqueueDownlink)?;
    if !app.sensors.is_registered(&id) {
        return Err(ApiError::not_found(format!("device {id} is not registered")));
    }
    let req: DownlinkRequest = parse_body(&body)?;
    let kind = DownlinkKind::parse(&req.kind).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", e.to_string()))?;
    let payload = match (&req.payload, kind) {
        (Some(b64), _) => STANDARD
            .decode(b64)
            .map_err(|_| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", "payload is not base64"))?,
        (None, DownlinkKind::SetWakeupPeriod) => {
            let minutes = req.minutes.ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", "minutes is required"))?;
            if minutes == 0 {
                return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", "minutes must be at least 1"));
            }
            DeviceCommand::SetWakeupPeriod { minutes }.encode()
        }
        (None, DownlinkKind::TimeSync) => {
            let offset_secs = req
                .offset_secs
                .ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", "offset_secs is required"))?;
            DeviceCommand::TimeSync { offset_secs }.encode()
        }
        (None, DownlinkKind::Raw) => return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", "raw needs a payload")),
    };
    let cmd = app.downlinks.enqueue(&id, req.port, kind, payload, Timestamp::now())?;
    Ok((StatusCode::CREATED, Json(cmd)).into_response())
}

#[derive(Deserialize)]
struct ForecastQuery {
    steps: Option<usize>,
}

pub const MAX_STEPS: usize = 144;

async fn forecast(
    State(app): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<ForecastQuery>,
) -> ApiResult<Json<Value>> {
    authorize(&app, &headers, Endpoint::GetForecast)?;
    known_device(&app, &id)?;
    if id != app.config.dataset.soil_device {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", format!("no model forecasts device {id}")));
    }
    let steps = q.steps.unwrap_or(1);
    if !(1..=MAX_STEPS).contains(&steps) {
        return Err(ApiError::bad_request(format!("steps must lie in 1..={MAX_STEPS}")));
    }
    let models = app.models.get().ok_or(ServeError::Forecast(ForecastError::NoModel))?;
    let results = forecast_from_store(&app.store, &app.config.dataset, &models, steps, Some(Timestamp::now()))?;
    Ok(Json(json!({"device_id": id, "model_version": models.version, "results": results})))
}

async fn list_rules(State(app): State<Shared>, headers: HeaderMap) -> ApiResult<Json<Value>> {
    let user = authorize(&app, &headers, Endpoint::ListRules)?;
    let rules: Vec<_> = app
        .rules
        .list()
        .into_iter()
        .filter(|r| user.role == Role::Admin || r.owner == user.id)
        .collect();
    Ok(Json(json!({"rules": rules})))
}

async fn create_rule(State(app): State<Shared>, headers: HeaderMap, body: axum::body::Bytes) -> ApiResult<Response> {
    let user = authorize(&app, &headers, Endpoint::CreateRule)?;
    let spec: RuleSpec = parse_body(&body)?;
    let rule = app.rules.create(&user.id, spec)?;
    Ok((StatusCode::CREATED, Json(rule)).into_response())
}

fn owned_rule(app: &App, user: &User, id: u64) -> ApiResult<()> {
    let rule = app.rules.get(id).ok_or_else(|| ApiError::not_found(format!("rule {id} not found")))?;
    if user.role != Role::Admin && rule.owner != user.id {
        return Err(ApiError::forbidden());
    }
    Ok(())
}

async fn update_rule(
    State(app): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<u64>,
    body: axum::body::Bytes,
) -> ApiResult<Json<Value>> {
    let user = authorize(&app, &headers, Endpoint::UpdateRule)?;
    owned_rule(&app, &user, id)?;
    let spec: RuleSpec = parse_body(&body)?;
    Ok(Json(json!(app.rules.replace(id, spec)?)))
}

async fn delete_rule(State(app): State<Shared>, headers: HeaderMap, Path(id): Path<u64>) -> ApiResult<StatusCode> {
    let user = authorize(&app, &headers, Endpoint::DeleteRule)?;
    owned_rule(&app, &user, id)?;
    app.rules.delete(id)?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
struct NotificationsQuery {
    limit: Option<usize>,
}

async fn notifications(State(app): State<Shared>, headers: HeaderMap, Query(q): Query<NotificationsQuery>) -> ApiResult<Json<Value>> {
    let user = authorize(&app, &headers, Endpoint::ListNotifications)?;
    let mut mine: Vec<_> = app
        .dispatcher
        .log()
        .snapshot()
        .into_iter()
        .filter(|n| user.role == Role::Admin || n.owner == user.id)
        .collect();
    let limit = q.limit.unwrap_or(100).clamp(1, 10_000);
    let skip = mine.len().saturating_sub(limit);
    mine.drain(..skip);
    Ok(Json(json!({"notifications": mine})))
}

async fn list_models(State(app): State<Shared>, headers: HeaderMap) -> ApiResult<Json<Value>> {
    authorize(&app, &headers, Endpoint::ListModels)?;
    let versions = app.registry.list().map_err(ApiError::internal)?;
    let current = app.registry.current().map_err(ApiError::internal)?;
    let job = app.training.lock().expect("train job poisoned").clone();
    Ok(Json(json!({"current": current, "versions": versions, "job": job})))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainRequest {
    seed: Option<u64>,
    epochs: Option<usize>,
}

async fn train_model(State(app): State<Shared>, headers: HeaderMap, body: axum::body::Bytes) -> ApiResult<Response> {
    authorize(&app, &headers, Endpoint::TrainModel)?;
    let req: TrainRequest = if body.is_empty() { TrainRequest::default() } else { parse_body(&body)? };
    let mut cfg: TrainConfig = app.config.train.clone();
    if let Some(seed) = req.seed {
        cfg.seed = seed;
    }
    if let Some(e) = req.epochs {
        cfg = cfg.with_epochs(e);
    }
    cfg.validate().map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", e.to_string()))?;
    let job = {
        let mut job = app.training.lock().expect("train job poisoned");
        if matches!(*job, TrainJob::Running { .. }) {
            return Err(ApiError::new(StatusCode::CONFLICT, "busy", "a training job is already running"));
        }
        *job = TrainJob::Running {
            seed: cfg.seed,
            started_at: Timestamp::now(),
        };
        job.clone()
    };
    let worker = app.clone();
    tokio::task::spawn_blocking(move || {
        let result = worker.train_and_publish(&cfg);
        let finished_at = Timestamp::now();
        *worker.training.lock().expect("train job poisoned") = match result {
            Ok(version) => TrainJob::Done { version, finished_at },
            Err(e) => {
                log::error!("training failed: {e:#}");
                TrainJob::Failed {
                    error: format!("{e:#}"),
                    finished_at,
                }
            }
        };
    });
    Ok((StatusCode::ACCEPTED, Json(json!({"job": job}))).into_response())
}

/// Serves the router until `shutdown` resolves.
pub async fn serve(
    app: Shared,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    log::info!("api listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(app)).with_graceful_shutdown(shutdown).await
}

//! `/api/v1` routes. Every non-2xx response is an [`ApiError`] JSON body.

use std::collections::HashMap;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::Engine;
use homegate_core::enrollment::{EnrollMessage, EnrollmentState, RequestId};
use homegate_core::gateway::{Decision, DeviceView, GatewayError, GatewayEvent};
use homegate_core::segmentation::{AddrBlock, Grant, ZoneRole};
use homegate_core::store::{Aggregate, Query as ReadingQuery};
use homegate_core::DeviceId;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio_stream::wrappers::BroadcastStream;
use tokio_stream::{Stream, StreamExt};
use tower_http::services::ServeDir;

use crate::Shared;

const HEARTBEAT: Duration = Duration::from_secs(15);

/// Every route that changes state, as `(method, path template)`. Each one
/// sits behind the bearer-token check.
pub const MUTATING_ROUTES: &[(&str, &str)] = &[
    ("POST", "/api/v1/enrollments/{id}/approve"),
    ("POST", "/api/v1/enrollments/{id}/deny"),
    ("POST", "/api/v1/devices/{id}/quarantine"),
    ("POST", "/api/v1/devices/{id}/release"),
    ("POST", "/api/v1/devices/{id}/revoke"),
    ("POST", "/api/v1/alerts/{id}/ack"),
    ("PUT", "/api/v1/zones/{name}"),
    ("POST", "/api/v1/zones/{name}/grants"),
    ("POST", "/api/v1/export"),
];

#[derive(Debug, Clone, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code: code.to_owned(),
            message: message.into(),
        }
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        let code = e.code();
        let status = match code {
            "unauthorized" => StatusCode::UNAUTHORIZED,
            "unknown_device" | "unknown_request" | "unknown_alert" => StatusCode::NOT_FOUND,
            "not_pending" | "not_quarantined" | "device_revoked" | "already_initialized"
            | "duplicate_name" | "overlapping_range" | "duplicate_pending" | "zone_exhausted"
            | "registry_full" => StatusCode::CONFLICT,
            "unknown_zone" | "invalid_enrollment" | "invalid_zone" | "bad_range" | "bad_aggregate"
            | "bad_recipient" => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self)).into_response()
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::invalid(e.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Params = Result<Query<HashMap<String, String>>, QueryRejection>;

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
}

async fn require_token(
    State(s): State<Arc<Shared>>,
    headers: HeaderMap,
    req: Request,
    next: Next,
) -> Response {
    match s.with(|gw| gw.check_token(bearer(&headers))) {
        Ok(()) => next.run(req).await,
        Err(e) => ApiError::from(e).into_response(),
    }
}

fn json_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(format!("bad JSON body: {e}")))
}

/// Like [`json_body`] but an empty body means all defaults.
fn optional_body<T: DeserializeOwned + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    json_body(body)
}

fn device_id(s: &str) -> ApiResult<DeviceId> {
    s.parse()
        .map_err(|_| ApiError::not_found(format!("no device `{s}`")))
}

fn request_id(s: &str) -> ApiResult<RequestId> {
    s.parse()
        .map_err(|_| ApiError::not_found(format!("no enrollment request `{s}`")))
}

fn param<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> ApiResult<Option<T>> {
    q.get(key)
        .map(|v| {
            v.parse()
                .map_err(|_| ApiError::invalid(format!("bad value for `{key}`")))
        })
        .transpose()
}

pub fn router(shared: Arc<Shared>, static_dir: Option<PathBuf>) -> Router {
    let protected = Router::new()
        .route("/enrollments/{id}/approve", post(approve))
        .route("/enrollments/{id}/deny", post(deny))
        .route("/devices/{id}/quarantine", post(quarantine))
        .route("/devices/{id}/release", post(release))
        .route("/devices/{id}/revoke", post(revoke))
        .route("/alerts/{id}/ack", post(ack))
        .route("/zones/{name}", put(define_zone))
        .route("/zones/{name}/grants", post(add_grant))
        .route("/export", post(export))
        .route_layer(middleware::from_fn_with_state(shared.clone(), require_token));
    let api = Router::new()
        .route("/health", get(health))
        .route("/devices", get(list_devices))
        .route("/devices/{id}", get(get_device))
        .route("/enrollments", get(list_enrollments))
        .route("/alerts", get(list_alerts))
        .route("/telemetry/{id}", get(telemetry))
        .route("/zones", get(list_zones))
        .route("/policy/rules", get(policy_rules))
        .route("/audit/verify", get(audit_verify))
        .route("/events", get(events))
        .merge(protected)
        .fallback(|| async { ApiError::not_found("no such route") })
        .method_not_allowed_fallback(|| async {
            ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed")
        })
        .with_state(shared);
    let app = Router::new().nest("/api/v1", api);
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.fallback(|| async { ApiError::not_found("not found") }),
    }
}

async fn health() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

async fn list_devices(State(s): State<Arc<Shared>>) -> Json<Vec<DeviceView>> {
    Json(s.with(|gw| gw.devices()))
}

async fn get_device(State(s): State<Arc<Shared>>, Path(id): Path<String>) -> ApiResult<Json<DeviceView>> {
    let id = device_id(&id)?;
    s.with(|gw| gw.device(&id).map(DeviceView::from))
        .map(Json)
        .ok_or_else(|| GatewayError::UnknownDevice(id).into())
}

async fn list_enrollments(State(s): State<Arc<Shared>>, q: Params) -> ApiResult<Json<Value>> {
    let Query(q) = q?;
    let state = match q.get("state") {
        None => None,
        Some(v) => Some(
            EnrollmentState::ALL
                .into_iter()
                .find(|st| {
                    serde_json::to_value(st)
                        .ok()
                        .and_then(|j| j.as_str().map(|n| n.eq_ignore_ascii_case(v)))
                        .unwrap_or(false)
                })
                .ok_or_else(|| ApiError::invalid(format!("unknown state `{v}`")))?,
        ),
    };
    let list = s.with(|gw| serde_json::to_value(gw.enrollments().list(state)));
    list.map(Json)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))
}

#[derive(Deserialize)]
struct ApproveBody {
    zone: String,
}

async fn approve(
    State(s): State<Arc<Shared>>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let rid = request_id(&id)?;
    let ApproveBody { zone } = json_body(&body)?;
    let token = bearer(&headers);
    let (payload, source, device) = s.with(|gw| {
        let source = gw.enrollments().get(&rid).map(|r| r.source_address);
        let payload = gw
            .decide_enrollment(&rid, Decision::Approve { zone }, token)?
            .expect("approval yields a payload");
        let device = gw.device(&payload.device_id).map(DeviceView::from);
        Ok::<_, GatewayError>((payload, source, device))
    })?;
    if let Some(src) = source {
        s.send_to(EnrollMessage::Approved(payload).encode(), src);
    }
    Ok(Json(json!({"request_id": rid, "state": "APPROVED", "device": device})))
}

#[derive(Deserialize, Default)]
struct ReasonBody {
    #[serde(default)]
    reason: String,
}

async fn deny(
    State(s): State<Arc<Shared>>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let rid = request_id(&id)?;
    let ReasonBody { reason } = optional_body(&body)?;
    s.with(|gw| gw.decide_enrollment(&rid, Decision::Deny { reason }, bearer(&headers)))?;
    Ok(Json(json!({"request_id": rid, "state": "DENIED"})))
}

fn device_view(s: &Shared, id: &DeviceId) -> ApiResult<Json<DeviceView>> {
    s.with(|gw| gw.device(id).map(DeviceView::from))
        .map(Json)
        .ok_or_else(|| GatewayError::UnknownDevice(*id).into())
}

async fn quarantine(
    State(s): State<Arc<Shared>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Json<DeviceView>> {
    let id = device_id(&id)?;
    s.with(|gw| gw.quarantine(&id, bearer(&headers)))?;
    device_view(&s, &id)
}

async fn release(
    State(s): State<Arc<Shared>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Json<DeviceView>> {
    let id = device_id(&id)?;
    s.with(|gw| gw.release(&id, bearer(&headers)))?;
    device_view(&s, &id)
}

async fn revoke(
    State(s): State<Arc<Shared>>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<DeviceView>> {
    let id = device_id(&id)?;
    let ReasonBody { reason } = optional_body(&body)?;
    s.with(|gw| gw.revoke_device(&id, &reason, bearer(&headers)))?;
    device_view(&s, &id)
}

async fn list_alerts(State(s): State<Arc<Shared>>, q: Params) -> ApiResult<Json<Value>> {
    let Query(q) = q?;
    let since: u64 = param(&q, "since")?.unwrap_or(0);
    let ack: Option<bool> = param(&q, "ack")?;
    let alerts: Vec<_> = s.with(|gw| {
        gw.alerts()
            .iter()
            .filter(|a| a.at >= since && ack.map_or(true, |want| a.acknowledged == want))
            .cloned()
            .collect()
    });
    Ok(Json(json!(alerts)))
}

async fn ack(
    State(s): State<Arc<Shared>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    let id: u64 = id
        .parse()
        .map_err(|_| ApiError::not_found(format!("no alert `{id}`")))?;
    let alert = s.with(|gw| gw.acknowledge_alert(id, bearer(&headers)))?;
    Ok(Json(json!(alert)))
}

async fn telemetry(
    State(s): State<Arc<Shared>>,
    Path(id): Path<String>,
    q: Params,
) -> ApiResult<Json<Value>> {
    let id = device_id(&id)?;
    let Query(q) = q?;
    let agg = match q.get("agg") {
        None => Aggregate::Raw,
        Some(a) => a.parse().map_err(GatewayError::from)?,
    };
    let query = ReadingQuery {
        from: param(&q, "from")?.unwrap_or(0),
        to: param(&q, "to")?.unwrap_or(u64::MAX),
        bucket_s: param(&q, "bucket")?.unwrap_or(60),
        agg,
    };
    let points = s.with(|gw| gw.query_telemetry(&id, &query))?;
    Ok(Json(json!({
        "device_id": id,
        "from": query.from,
        "to": query.to,
        "bucket": query.bucket_s,
        "agg": agg,
        "points": points,
    })))
}

async fn list_zones(State(s): State<Arc<Shared>>) -> Json<Value> {
    Json(json!(s.with(|gw| gw.zones())))
}

#[derive(Deserialize)]
struct ZoneBody {
    range: String,
    role: String,
}

async fn define_zone(
    State(s): State<Arc<Shared>>,
    headers: HeaderMap,
    Path(name): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let ZoneBody { range, role } = json_body(&body)?;
    let range: AddrBlock = range.parse().map_err(GatewayError::Segmentation)?;
    let role: ZoneRole = role.parse().map_err(GatewayError::Segmentation)?;
    let zone = s.with(|gw| gw.define_zone(&name, range, role, bearer(&headers)))?;
    Ok((StatusCode::CREATED, Json(json!(zone))))
}

async fn add_grant(
    State(s): State<Arc<Shared>>,
    headers: HeaderMap,
    Path(name): Path<String>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let grant: Grant = json_body(&body)?;
    s.with(|gw| gw.add_grant(&name, grant, bearer(&headers)))?;
    let zone = s.with(|gw| gw.segmentation().zone(&name).cloned());
    Ok(Json(json!(zone)))
}

async fn policy_rules(State(s): State<Arc<Shared>>) -> impl IntoResponse {
    let text = s.with(|gw| gw.policy().render());
    ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], text)
}

async fn audit_verify(State(s): State<Arc<Shared>>) -> ApiResult<Json<Value>> {
    let status = s.with(|gw| gw.verify_audit())?;
    Ok(Json(json!({"status": status, "text": status.to_string()})))
}

#[derive(Deserialize)]
struct ExportBody {
    from: u64,
    to: u64,
    recipient_pub: String,
}

async fn export(
    State(s): State<Arc<Shared>>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let ExportBody { from, to, recipient_pub } = json_body(&body)?;
    let b64 = base64::engine::general_purpose::STANDARD;
    let recipient: [u8; 32] = b64
        .decode(recipient_pub.trim())
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "bad_recipient",
                "recipient_pub must be 32 bytes of base64",
            )
        })?;
    let bundle = s.with(|gw| gw.export(from, to, &recipient, bearer(&headers)))?;
    Ok(Json(json!({
        "from": from,
        "to": to,
        "count": bundle.header.count,
        "devices": bundle.header.devices,
        "bundle_hash": hex::encode(bundle.hash()),
        "bundle": b64.encode(&bundle.bytes),
    })))
}

fn sse_event(ev: &GatewayEvent) -> Option<Event> {
    let mut v = serde_json::to_value(ev).ok()?;
    let data = v.get_mut("data")?.take();
    Event::default().event(ev.name()).json_data(data).ok()
}

async fn events(State(s): State<Arc<Shared>>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    // Lagging subscribers skip what they missed rather than disconnect.
    let stream = BroadcastStream::new(s.subscribe())
        .filter_map(|m| m.ok().as_ref().and_then(sse_event))
        .map(Ok);
    Sse::new(stream).keep_alive(KeepAlive::new().interval(HEARTBEAT).text("heartbeat"))
}

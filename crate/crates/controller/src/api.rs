//! HTTP/JSON measurement interface.
//!
//! | route | body | reply |
//! |---|---|---|
//! | `PUT /ping/` | `{tgt, num, payload?, out_port?}` | `{icmp_id}` |
//! | `GET /ping/dump`, `POST /ping/clear` | | dump object / `{}` |
//! | `PUT /traceroute/` | `{tgt, probes_per_ttl, out_port?}` | `{icmp_id}` |
//! | `GET /traceroute/dump`, `POST /traceroute/clear` | | |
//! | `PUT /routerid/query/` | `{tgt, out_port?}` | `{icmp_id}` |
//! | `GET /routerid/dump`, `POST /routerid/clear` | | |
//! | `GET`/`PUT /routerid/config` | `{asn, ident, serve}` | same |
//! | `GET /diagnostics` | | counters |
//!
//! Errors are `{"error": text}` with 400 (bad input), 403 (auth or policy),
//! 429 (rate limit) or 503 (state table full, or no switch connected).
//! A failed request never creates a task or spends rate budget.

use std::net::Ipv4Addr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use ofprobe_core::pktlab::RouterIdentity;
use ofprobe_core::probeengine::{EngineError, PingRequest, TaskKind, TracerouteRequest, MAX_TTL};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::daemon::Daemon;
use crate::policy::{Denial, TaskClass};

pub const STATE_FULL_HINT: &str = "dump the state table, then clear it, to free identifiers";

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    Denied(Denial),
    StateFull,
    Unavailable(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, json!({ "error": m })),
            ApiError::Denied(d @ Denial::RateLimited { .. }) => {
                (StatusCode::TOO_MANY_REQUESTS, json!({ "error": d.to_string() }))
            }
            ApiError::Denied(d) => (StatusCode::FORBIDDEN, json!({ "error": d.to_string() })),
            ApiError::StateFull => (
                StatusCode::SERVICE_UNAVAILABLE,
                json!({ "error": EngineError::StateFull.to_string(), "state_full": true, "hint": STATE_FULL_HINT }),
            ),
            ApiError::Unavailable(m) => (StatusCode::SERVICE_UNAVAILABLE, json!({ "error": m })),
        };
        (status, Json(body)).into_response()
    }
}

impl From<Denial> for ApiError {
    fn from(d: Denial) -> Self {
        ApiError::Denied(d)
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::StateFull => ApiError::StateFull,
            EngineError::InvalidRequest(_) | EngineError::Packet(_) => ApiError::BadRequest(e.to_string()),
            EngineError::Session(s) => ApiError::Unavailable(format!("no active switch session: {s}")),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed request body: {e}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PingBody {
    tgt: Ipv4Addr,
    num: u32,
    #[serde(default)]
    payload: String,
    out_port: Option<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TracerouteBody {
    tgt: Ipv4Addr,
    probes_per_ttl: u16,
    out_port: Option<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryBody {
    tgt: Ipv4Addr,
    out_port: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterIdSettings {
    pub asn: Option<u32>,
    pub ident: Option<String>,
    pub serve: bool,
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct TaskAccepted {
    pub icmp_id: u16,
}

pub fn router(daemon: Arc<Daemon>) -> Router {
    Router::new()
        .route("/ping/", put(put_ping))
        .route("/ping", put(put_ping))
        .route("/ping/dump", get(ping_dump))
        .route("/ping/clear", post(ping_clear))
        .route("/traceroute/", put(put_traceroute))
        .route("/traceroute", put(put_traceroute))
        .route("/traceroute/dump", get(traceroute_dump))
        .route("/traceroute/clear", post(traceroute_clear))
        .route("/routerid/query/", put(put_router_id_query))
        .route("/routerid/query", put(put_router_id_query))
        .route("/routerid/dump", get(router_id_dump))
        .route("/routerid/clear", post(router_id_clear))
        .route("/routerid/config", get(get_router_id_config).put(put_router_id_config))
        .route("/diagnostics", get(diagnostics))
        .layer(middleware::from_fn_with_state(Arc::clone(&daemon), require_token))
        .with_state(daemon)
}

async fn require_token(State(daemon): State<Arc<Daemon>>, req: Request, next: Next) -> Response {
    let header = req.headers().get(header::AUTHORIZATION).and_then(|v| v.to_str().ok());
    let verdict = daemon.lock().policy.authorize(header);
    match verdict {
        Ok(()) => next.run(req).await,
        Err(d) => ApiError::Denied(d).into_response(),
    }
}

/// Admission, start and charge under one lock so concurrent requests cannot
/// overdraw the bucket or interleave with packet handling.
fn start_task(
    daemon: &Daemon,
    class: TaskClass,
    probes: u64,
    start: impl FnOnce(&mut ofprobe_core::controller::Controller, ofprobe_core::Timestamp) -> Result<u16, EngineError>,
) -> ApiResult<Json<TaskAccepted>> {
    let mut st = daemon.lock();
    st.policy.permit(class)?;
    let now = daemon.now();
    st.policy.check_rate(probes, now)?;
    let icmp_id = start(&mut st.controller, now)?;
    st.policy.charge(probes, now);
    Ok(Json(TaskAccepted { icmp_id }))
}

async fn put_ping(State(daemon): State<Arc<Daemon>>, body: Bytes) -> ApiResult<Json<TaskAccepted>> {
    let b: PingBody = parse(&body)?;
    let max = daemon.config().probe.max_probes_per_task;
    if b.num == 0 || b.num > max {
        return Err(ApiError::BadRequest(format!("num must be in 1..={max}, got {}", b.num)));
    }
    let req = PingRequest {
        target: b.tgt,
        num: b.num,
        payload: b.payload.into_bytes(),
        out_port: b.out_port.unwrap_or(daemon.config().probe.default_out_port),
    };
    start_task(&daemon, TaskClass::Ping, u64::from(req.num), |c, now| c.start_ping(None, &req, now))
}

async fn put_traceroute(State(daemon): State<Arc<Daemon>>, body: Bytes) -> ApiResult<Json<TaskAccepted>> {
    let b: TracerouteBody = parse(&body)?;
    if b.probes_per_ttl == 0 {
        return Err(ApiError::BadRequest("probes_per_ttl must be at least 1".into()));
    }
    let req = TracerouteRequest {
        target: b.tgt,
        probes_per_ttl: b.probes_per_ttl,
        out_port: b.out_port.unwrap_or(daemon.config().probe.default_out_port),
    };
    // charged for the worst case: every TTL up to the maximum
    let probes = u64::from(MAX_TTL) * u64::from(req.probes_per_ttl);
    start_task(&daemon, TaskClass::Traceroute, probes, |c, now| c.start_traceroute(None, &req, now))
}

async fn put_router_id_query(State(daemon): State<Arc<Daemon>>, body: Bytes) -> ApiResult<Json<TaskAccepted>> {
    let b: QueryBody = parse(&body)?;
    let port = b.out_port.unwrap_or(daemon.config().probe.default_out_port);
    start_task(&daemon, TaskClass::RouterIdQuery, 1, |c, now| c.start_router_id_query(None, b.tgt, port, now))
}

fn dump(daemon: &Daemon, pick: impl FnOnce(ofprobe_core::probeengine::EngineSnapshot) -> Value) -> Json<Value> {
    let snapshot = daemon.lock().controller.dump_state();
    Json(pick(snapshot))
}

fn to_value(v: impl Serialize) -> Value {
    serde_json::to_value(v).expect("dump documents always serialize")
}

async fn ping_dump(State(daemon): State<Arc<Daemon>>) -> Json<Value> {
    dump(&daemon, |s| to_value(s.ping))
}

async fn traceroute_dump(State(daemon): State<Arc<Daemon>>) -> Json<Value> {
    dump(&daemon, |s| to_value(s.traceroute))
}

async fn router_id_dump(State(daemon): State<Arc<Daemon>>) -> Json<Value> {
    dump(&daemon, |s| to_value(s.router_id))
}

fn clear(daemon: &Daemon, kind: TaskKind) -> Json<Value> {
    daemon.lock().controller.clear_state(kind);
    Json(json!({}))
}

async fn ping_clear(State(daemon): State<Arc<Daemon>>) -> Json<Value> {
    clear(&daemon, TaskKind::Ping)
}

async fn traceroute_clear(State(daemon): State<Arc<Daemon>>) -> Json<Value> {
    clear(&daemon, TaskKind::Traceroute)
}

async fn router_id_clear(State(daemon): State<Arc<Daemon>>) -> Json<Value> {
    clear(&daemon, TaskKind::RouterId)
}

fn current_settings(daemon: &Daemon) -> RouterIdSettings {
    let st = daemon.lock();
    let (identity, serve) = st.controller.engine().router_identity();
    RouterIdSettings { asn: identity.map(|i| i.asn), ident: identity.map(|i| i.ident.clone()), serve }
}

async fn get_router_id_config(State(daemon): State<Arc<Daemon>>) -> Json<RouterIdSettings> {
    Json(current_settings(&daemon))
}

async fn put_router_id_config(State(daemon): State<Arc<Daemon>>, body: Bytes) -> ApiResult<Json<RouterIdSettings>> {
    let b: RouterIdSettings = parse(&body)?;
    let identity = match (b.asn, b.ident) {
        (Some(asn), Some(ident)) => {
            Some(RouterIdentity::new(asn, ident).map_err(|e| ApiError::BadRequest(e.to_string()))?)
        }
        (None, None) => None,
        _ => return Err(ApiError::BadRequest("asn and ident must be given together".into())),
    };
    if b.serve && identity.is_none() {
        return Err(ApiError::BadRequest("serving needs an asn and ident".into()));
    }
    {
        let mut st = daemon.lock();
        if b.serve {
            st.policy.permit(TaskClass::RouterIdServe)?;
        }
        st.controller.engine_mut().set_router_identity(identity, b.serve);
    }
    Ok(Json(current_settings(&daemon)))
}

async fn diagnostics(State(daemon): State<Arc<Daemon>>) -> Json<Value> {
    let st = daemon.lock();
    let engine = st.controller.engine();
    let sessions: Vec<Value> = st
        .controller
        .sessions()
        .map(|s| {
            json!({
                "session": s.id().0,
                "datapath_id": s.datapath_id(),
                "active": s.is_active(),
                "rtt_cs_us": engine.estimator(s.id()).and_then(|e| e.current()).map(|d| d.as_micros() as u64),
            })
        })
        .collect();
    Json(json!({
        "live_ids": engine.live_ids(),
        "replies": engine.diagnostics(),
        "sessions": sessions,
    }))
}

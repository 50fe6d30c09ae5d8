//! Local monitoring daemon: the DNS proxy, the single store writer, the
//! retention sweeper, and the loopback control API used by the CLI and UI.
//!
//! Control API (JSON unless noted):
//!
//! | route | |
//! |---|---|
//! | `GET /local/v1/stream` | server-sent events; `data: {ts,qname,blocked}` per query, `event: recording` on state changes |
//! | `GET\|POST\|DELETE /local/v1/filters` | list, upsert (rule body), remove (`?pattern=`) |
//! | `GET /local/v1/recording` | current recording state |
//! | `POST /local/v1/recording/start`, `/stop` | start (`{app, tags}`) or stop the recording |
//! | `GET /local/v1/sessions`, `GET\|DELETE /local/v1/sessions/{id}` | session summaries and removal |
//! | `POST /local/v1/sessions/{id}/sanitize`, `/uploaded` | remove names (`{remove: [...]}`), mark uploaded |
//! | `GET /local/v1/export` | plain-text dump |

use std::collections::{BTreeSet, HashMap};
use std::convert::Infallible;
use std::io;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc};
use tokio::task::JoinSet;
use tokio_stream::wrappers::errors::BroadcastStreamRecvError;
use tokio_stream::wrappers::BroadcastStream;
use tokio_stream::{Stream, StreamExt};
use tracing::{info, warn};

use crate::dns::{CapturedQuery, FilterRule, FilterSet, Proxy, ProxyConfig, SharedFilters};
use crate::fqdn::Fqdn;
use crate::logstore::{
    LogStore, RecordingSession, RetentionPolicy, SessionId, SessionState, StoreError, StoreEvent,
};

pub const DEFAULT_CONTROL: SocketAddr = SocketAddr::new(std::net::IpAddr::V4(Ipv4Addr::LOCALHOST), 5380);
pub const DEFAULT_PURGE_INTERVAL: Duration = Duration::from_secs(60);

#[derive(Debug, Clone)]
pub struct MonitorConfig {
    pub proxy: ProxyConfig,
    pub control: SocketAddr,
    pub retention: RetentionPolicy,
    pub purge_interval: Duration,
    /// Where filter edits are persisted; `None` keeps them in memory.
    pub filters_path: Option<PathBuf>,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            proxy: ProxyConfig::default(),
            control: DEFAULT_CONTROL,
            retention: RetentionPolicy::keep_forever(),
            purge_interval: DEFAULT_PURGE_INTERVAL,
            filters_path: None,
        }
    }
}

pub type SharedStore = Arc<Mutex<LogStore>>;

fn lock(store: &SharedStore) -> MutexGuard<'_, LogStore> {
    store.lock().unwrap_or_else(|e| e.into_inner())
}

/// Summary of a session as exposed over the control API.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: SessionId,
    pub app_bundle_id: String,
    pub tags: BTreeSet<String>,
    pub start_ts: i64,
    pub end_ts: Option<i64>,
    pub state: SessionState,
    pub requests: usize,
    pub distinct_names: usize,
}

impl From<&RecordingSession> for SessionSummary {
    fn from(s: &RecordingSession) -> Self {
        SessionSummary {
            id: s.id.clone(),
            app_bundle_id: s.app_bundle_id.clone(),
            tags: s.tags.clone(),
            start_ts: s.start_ts,
            end_ts: s.end_ts,
            state: s.state,
            requests: s.entries.len(),
            distinct_names: s.name_counts().len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameCount {
    pub qname: Fqdn,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionDetail {
    #[serde(flatten)]
    pub summary: SessionSummary,
    pub names: Vec<NameCount>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordingStatus {
    pub active: bool,
    pub session: Option<SessionSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterListing {
    /// True while a recording runs and rules are not applied.
    pub suspended: bool,
    pub rules: Vec<FilterRule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartRequest {
    pub app: String,
    #[serde(default)]
    pub tags: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SanitizeRequest {
    pub remove: BTreeSet<Fqdn>,
}

/// A running monitor. Dropping the handle aborts all tasks without
/// compacting the store.
pub struct MonitorHandle {
    dns_addr: SocketAddr,
    control_addr: SocketAddr,
    store: SharedStore,
    filters: Arc<SharedFilters>,
    tasks: JoinSet<()>,
}

impl MonitorHandle {
    pub fn dns_addr(&self) -> SocketAddr {
        self.dns_addr
    }

    pub fn control_addr(&self) -> SocketAddr {
        self.control_addr
    }

    pub fn store(&self) -> &SharedStore {
        &self.store
    }

    pub fn filters(&self) -> &Arc<SharedFilters> {
        &self.filters
    }

    pub fn subscribe(&self) -> broadcast::Receiver<StoreEvent> {
        lock(&self.store).subscribe()
    }

    /// Waits until any task ends, which only happens on a fatal error.
    pub async fn wait(&mut self) {
        if let Some(Err(e)) = self.tasks.join_next().await {
            warn!(error = %e, "monitor task failed");
        }
    }

    pub async fn shutdown(mut self) {
        self.tasks.abort_all();
        while self.tasks.join_next().await.is_some() {}
        if let Err(e) = lock(&self.store).compact() {
            warn!(error = %e, "compacting store on shutdown failed");
        }
    }
}

/// Binds the proxy and control API and starts all tasks.
pub async fn start(config: MonitorConfig, store: LogStore, filters: FilterSet) -> io::Result<MonitorHandle> {
    let filters = Arc::new(SharedFilters::new(filters));
    let (tx, mut rx) = mpsc::unbounded_channel::<CapturedQuery>();
    let proxy = Proxy::bind(config.proxy, Arc::clone(&filters), store.recording_flag(), tx).await?;
    let dns_addr = proxy.local_addr()?;
    let control = TcpListener::bind(config.control).await?;
    let control_addr = control.local_addr()?;
    let store = Arc::new(Mutex::new(store));
    let mut tasks = JoinSet::new();

    tasks.spawn(async move {
        if let Err(e) = proxy.run().await {
            warn!(error = %e, "proxy stopped");
        }
    });

    let writer_store = Arc::clone(&store);
    tasks.spawn(async move {
        while let Some(q) = rx.recv().await {
            if let Err(e) = lock(&writer_store).record(q.qname, q.blocked) {
                warn!(error = %e, "failed to store query");
            }
        }
    });

    if config.retention.max_age().is_some() {
        let sweep_store = Arc::clone(&store);
        let (policy, every) = (config.retention, config.purge_interval);
        tasks.spawn(async move {
            let mut tick = tokio::time::interval(every);
            loop {
                tick.tick().await;
                let mut s = lock(&sweep_store);
                let now = s.clock().now();
                match s.purge_expired(now, &policy) {
                    Ok(0) => {}
                    Ok(n) => info!(purged = n, "retention sweep"),
                    Err(e) => warn!(error = %e, "retention sweep failed"),
                }
            }
        });
    }

    let state = ControlState {
        store: Arc::clone(&store),
        filters: Arc::clone(&filters),
        filters_path: config.filters_path.map(Arc::new),
    };
    let app = control_router(state);
    tasks.spawn(async move {
        if let Err(e) = axum::serve(control, app).await {
            warn!(error = %e, "control api stopped");
        }
    });

    Ok(MonitorHandle { dns_addr, control_addr, store, filters, tasks })
}

#[derive(Clone)]
struct ControlState {
    store: SharedStore,
    filters: Arc<SharedFilters>,
    filters_path: Option<Arc<PathBuf>>,
}

struct ApiError(StatusCode, &'static str, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1, "detail": self.2 }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let (status, kind) = match &e {
            StoreError::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            StoreError::AmbiguousSession(_) => (StatusCode::BAD_REQUEST, "ambiguous_session"),
            StoreError::RecordingAlreadyActive(_) => (StatusCode::CONFLICT, "recording_active"),
            StoreError::NotActive(_) => (StatusCode::CONFLICT, "not_active"),
            StoreError::InvalidState { .. } => (StatusCode::CONFLICT, "invalid_state"),
            StoreError::InvalidSessionId(_) | StoreError::InvalidBundleId(_) | StoreError::InvalidTag(_) => {
                (StatusCode::BAD_REQUEST, "invalid_parameter")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError(status, kind, e.to_string())
    }
}

fn bad_request(detail: impl ToString) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, "invalid_parameter", detail.to_string())
}

type ApiResult = Result<Response, ApiError>;

fn control_router(state: ControlState) -> Router {
    Router::new()
        .route("/local/v1/stream", get(stream))
        .route("/local/v1/filters", get(list_filters).post(add_filter).delete(remove_filter))
        .route("/local/v1/recording", get(recording_status))
        .route("/local/v1/recording/start", post(start_recording))
        .route("/local/v1/recording/stop", post(stop_recording))
        .route("/local/v1/sessions", get(list_sessions))
        .route("/local/v1/sessions/{id}", get(session_detail).delete(delete_session))
        .route("/local/v1/sessions/{id}/sanitize", post(sanitize))
        .route("/local/v1/sessions/{id}/uploaded", post(mark_uploaded))
        .route("/local/v1/export", get(export))
        .with_state(state)
}

fn to_event(item: Result<StoreEvent, BroadcastStreamRecvError>) -> Event {
    match item {
        Ok(StoreEvent::Entry(e)) => Event::default().json_data(e).expect("entry serializes"),
        Ok(StoreEvent::RecordingStarted { id, app_bundle_id, start_ts }) => Event::default()
            .event("recording")
            .json_data(json!({ "state": "active", "id": id, "app_bundle_id": app_bundle_id, "ts": start_ts }))
            .expect("event serializes"),
        Ok(StoreEvent::RecordingStopped { id, end_ts }) => Event::default()
            .event("recording")
            .json_data(json!({ "state": "stopped", "id": id, "ts": end_ts }))
            .expect("event serializes"),
        Err(BroadcastStreamRecvError::Lagged(n)) => Event::default().event("lagged").data(n.to_string()),
    }
}

async fn stream(State(s): State<ControlState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = lock(&s.store).subscribe();
    let events = BroadcastStream::new(rx).map(|item| Ok(to_event(item)));
    Sse::new(events).keep_alive(KeepAlive::default())
}

fn filter_listing(s: &ControlState) -> FilterListing {
    FilterListing {
        suspended: lock(&s.store).recording_flag().is_active(),
        rules: s.filters.snapshot().rules().collect(),
    }
}

fn persist_filters(s: &ControlState, set: &FilterSet) -> Result<(), ApiError> {
    if let Some(path) = &s.filters_path {
        set.save(path).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    }
    Ok(())
}

async fn list_filters(State(s): State<ControlState>) -> Json<FilterListing> {
    Json(filter_listing(&s))
}

async fn add_filter(State(s): State<ControlState>, body: axum::body::Bytes) -> ApiResult {
    let rule: FilterRule = serde_json::from_slice(&body).map_err(bad_request)?;
    let (replaced, set) = s.filters.update(|f| f.insert(rule.clone()));
    persist_filters(&s, &set)?;
    let status = if replaced.is_some() { StatusCode::OK } else { StatusCode::CREATED };
    Ok((status, Json(rule)).into_response())
}

async fn remove_filter(State(s): State<ControlState>, Query(q): Query<HashMap<String, String>>) -> ApiResult {
    let pattern = q.get("pattern").ok_or_else(|| bad_request("missing parameter pattern"))?;
    let pattern = Fqdn::new(pattern).map_err(bad_request)?;
    let (removed, set) = s.filters.update(|f| f.remove(&pattern));
    if !removed {
        return Err(ApiError(StatusCode::NOT_FOUND, "unknown_filter", format!("no rule for {pattern}")));
    }
    persist_filters(&s, &set)?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn recording_status(State(s): State<ControlState>) -> Json<RecordingStatus> {
    let store = lock(&s.store);
    let session = store.active_session().map(SessionSummary::from);
    Json(RecordingStatus { active: session.is_some(), session })
}

async fn start_recording(State(s): State<ControlState>, body: axum::body::Bytes) -> ApiResult {
    let req: StartRequest = serde_json::from_slice(&body).map_err(bad_request)?;
    let session = lock(&s.store).start_recording(&req.app, req.tags)?;
    Ok((StatusCode::CREATED, Json(SessionSummary::from(&session))).into_response())
}

async fn stop_recording(State(s): State<ControlState>) -> ApiResult {
    let mut store = lock(&s.store);
    let Some(active) = store.active_session().map(|a| a.id.clone()) else {
        return Err(ApiError(StatusCode::CONFLICT, "not_active", "no recording is active".into()));
    };
    let session = store.stop_recording(&active)?;
    Ok(Json(SessionSummary::from(&session)).into_response())
}

async fn list_sessions(State(s): State<ControlState>) -> Json<Vec<SessionSummary>> {
    Json(lock(&s.store).sessions().iter().map(SessionSummary::from).collect())
}

async fn session_detail(State(s): State<ControlState>, Path(id): Path<String>) -> ApiResult {
    let store = lock(&s.store);
    let id = store.resolve_session(&id)?;
    let session = store.session(&id).expect("resolved id exists");
    let names = session.name_counts().into_iter().map(|(qname, count)| NameCount { qname, count }).collect();
    Ok(Json(SessionDetail { summary: session.into(), names }).into_response())
}

async fn delete_session(State(s): State<ControlState>, Path(id): Path<String>) -> ApiResult {
    let mut store = lock(&s.store);
    let id = store.resolve_session(&id)?;
    store.delete_session(&id)?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn sanitize(State(s): State<ControlState>, Path(id): Path<String>, body: axum::body::Bytes) -> ApiResult {
    let req: SanitizeRequest = serde_json::from_slice(&body).map_err(bad_request)?;
    let mut store = lock(&s.store);
    let id = store.resolve_session(&id)?;
    let session = store.sanitize(&id, &req.remove)?;
    Ok(Json(SessionSummary::from(&session)).into_response())
}

async fn mark_uploaded(State(s): State<ControlState>, Path(id): Path<String>) -> ApiResult {
    let mut store = lock(&s.store);
    let id = store.resolve_session(&id)?;
    let session = store.mark_uploaded(&id)?;
    Ok(Json(SessionSummary::from(&session)).into_response())
}

async fn export(State(s): State<ControlState>) -> Response {
    let dump = lock(&s.store).export_all();
    ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], dump).into_response()
}

//! JSON HTTP interface of the aggregation service.

use std::collections::HashMap;
use std::future::Future;
use std::str::FromStr;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;

use super::{AggError, Aggregator, GroupMembers, Metric, DEFAULT_MIN_APPS};
use crate::cooccurrence::{CoOccurrenceError, CoOccurrenceQuery};
use crate::fqdn::Fqdn;

pub const MAX_UPLOAD_BYTES: usize = 5 * 1024 * 1024;
const DEFAULT_COOCCURRENCE_LIMIT: usize = 50;

impl IntoResponse for AggError {
    fn into_response(self) -> Response {
        let status = match &self {
            AggError::CoOccurrence(CoOccurrenceError::TargetNotFound(_)) => StatusCode::NOT_FOUND,
            AggError::Schema(_)
            | AggError::UnknownSortKey(_)
            | AggError::EmptyGroup
            | AggError::InvalidParam(_)
            | AggError::CoOccurrence(_) => StatusCode::BAD_REQUEST,
            AggError::PayloadTooLarge(_) => StatusCode::PAYLOAD_TOO_LARGE,
            AggError::UnknownApp(_)
            | AggError::UnknownGroup(_)
            | AggError::MissingCohort(_)
            | AggError::UnknownRecording(_) => StatusCode::NOT_FOUND,
            AggError::Corrupt { .. } | AggError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.kind(), "detail": self.to_string() }))).into_response()
    }
}

type Params = Query<HashMap<String, String>>;

fn param<T: FromStr>(q: &HashMap<String, String>, name: &str) -> Result<Option<T>, AggError> {
    q.get(name)
        .map(|v| v.parse().map_err(|_| AggError::InvalidParam(format!("invalid {name} {v:?}"))))
        .transpose()
}

fn required<'a>(q: &'a HashMap<String, String>, name: &str) -> Result<&'a str, AggError> {
    q.get(name).map(String::as_str).ok_or_else(|| AggError::InvalidParam(format!("missing parameter {name}")))
}

pub fn router(agg: Arc<Aggregator>) -> Router {
    Router::new()
        .route("/api/v1/recordings", post(upload))
        .route("/api/v1/apps", get(list_apps))
        .route("/api/v1/apps/{id}", get(app_detail))
        .route("/api/v1/apps/{id}/diff", get(diff))
        .route("/api/v1/groups", post(create_group))
        .route("/api/v1/groups/{id}", get(group_report))
        .route("/api/v1/trackers/candidates", get(candidates))
        .route("/api/v1/cooccurrence", get(cooccurrence))
        .fallback(|| async { (StatusCode::NOT_FOUND, Json(json!({"error": "not_found", "detail": "no such route"}))) })
        .with_state(agg)
}

pub async fn serve(
    listener: TcpListener,
    agg: Arc<Aggregator>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(agg)).with_graceful_shutdown(shutdown).await
}

async fn upload(State(agg): State<Arc<Aggregator>>, headers: HeaderMap, body: Body) -> Result<Response, AggError> {
    let declared = headers
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<usize>().ok());
    if declared.is_some_and(|n| n > MAX_UPLOAD_BYTES) {
        return Err(AggError::PayloadTooLarge(MAX_UPLOAD_BYTES));
    }
    let bytes = axum::body::to_bytes(body, MAX_UPLOAD_BYTES)
        .await
        .map_err(|_| AggError::PayloadTooLarge(MAX_UPLOAD_BYTES))?;
    let id = agg.ingest(&bytes)?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))).into_response())
}

async fn list_apps(State(agg): State<Arc<Aggregator>>, Query(q): Params) -> Result<Response, AggError> {
    let key = q.get("sort").map(|s| Metric::parse(s)).transpose()?;
    // Sorted tables default to descending, the plain listing to ascending ids.
    let descending = match q.get("order").map(String::as_str) {
        None => key.is_some(),
        Some("desc") => true,
        Some("asc") => false,
        Some(other) => return Err(AggError::InvalidParam(format!("order must be asc or desc, got {other:?}"))),
    };
    let ids: Option<Vec<String>> =
        q.get("ids").map(|s| s.split(',').filter(|s| !s.is_empty()).map(str::to_owned).collect());
    Ok(Json(agg.comparison_table(ids.as_deref(), key, descending)?).into_response())
}

async fn app_detail(State(agg): State<Arc<Aggregator>>, Path(id): Path<String>) -> Result<Response, AggError> {
    Ok(Json(agg.app_detail(&id)?).into_response())
}

async fn diff(
    State(agg): State<Arc<Aggregator>>,
    Path(id): Path<String>,
    Query(q): Params,
) -> Result<Response, AggError> {
    Ok(Json(agg.compare_cohorts(&id, required(&q, "a")?, required(&q, "b")?)?).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewGroup {
    name: String,
    members: GroupMembers,
}

async fn create_group(State(agg): State<Arc<Aggregator>>, body: axum::body::Bytes) -> Result<Response, AggError> {
    let req: NewGroup =
        serde_json::from_slice(&body).map_err(|e| AggError::InvalidParam(format!("bad group: {e}")))?;
    let group = agg.create_group(&req.name, req.members)?;
    Ok((StatusCode::CREATED, Json(group)).into_response())
}

async fn group_report(State(agg): State<Arc<Aggregator>>, Path(id): Path<String>) -> Result<Response, AggError> {
    Ok(Json(agg.group_report(&id)?).into_response())
}

async fn candidates(State(agg): State<Arc<Aggregator>>, Query(q): Params) -> Result<Response, AggError> {
    let min_apps = param(&q, "min_apps")?.unwrap_or(DEFAULT_MIN_APPS);
    Ok(Json(agg.tracker_candidates(min_apps)?).into_response())
}

async fn cooccurrence(State(agg): State<Arc<Aggregator>>, Query(q): Params) -> Result<Response, AggError> {
    let recording = required(&q, "recording")?;
    let domain = required(&q, "domain")?;
    let domain = Fqdn::new(domain).map_err(|e| AggError::InvalidParam(format!("domain {domain:?}: {e}")))?;
    let window: u32 = param(&q, "window")?.ok_or_else(|| AggError::InvalidParam("missing parameter window".into()))?;
    let limit = param(&q, "limit")?.unwrap_or(DEFAULT_COOCCURRENCE_LIMIT);
    let query = CoOccurrenceQuery::new(domain, window)?;
    let mut rows = agg.cooccurrence(recording, &query)?;
    rows.truncate(limit);
    Ok(Json(rows).into_response())
}

use std::sync::Arc;

use appwatch_core::aggregator::{api, Aggregator};
use appwatch_core::trackerdb::{TrackerDb, TrackerList};
use appwatch_core::Fqdn;
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn trackers() -> TrackerDb {
    TrackerDb::from_lists([TrackerList::with_entries("fixture", [(Fqdn::new("doubleclick.net").unwrap(), true)])])
}

fn doc(app: &str, tags: &[&str], duration: u64, entries: &[(u64, &str)]) -> String {
    json!({"v": 1, "app": app, "week": "2020-W38", "duration_s": duration, "tags": tags, "entries": entries}).to_string()
}

async fn send(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn upload(app: &Router, body: String) -> String {
    let (status, json) = send(app, "POST", "/api/v1/recordings", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{json}");
    json["id"].as_str().unwrap().to_owned()
}

async fn fixture() -> (Router, Vec<String>) {
    let app = api::router(Arc::new(Aggregator::in_memory(trackers())));
    let shared = [(0, "api.alpha.example"), (2, "googleads.g.doubleclick.net"), (4, "api.alpha.example")];
    let mut ids = Vec::new();
    for tag in ["ios13", "ios14"] {
        ids.push(upload(&app, doc("com.alpha", &[tag], 60, &shared)).await);
    }
    for _ in 0..2 {
        ids.push(upload(&app, doc("com.beta", &[], 120, &[(0, "api.beta.example"), (1, "api.beta.example")])).await);
    }
    ids.push(upload(&app, doc("com.gamma", &[], 60, &[(0, "one.gamma.example")])).await);
    (app, ids)
}

#[tokio::test]
async fn comparison_listing_sorts_and_filters() {
    let (app, _) = fixture().await;
    let (status, json) = send(&app, "GET", "/api/v1/apps", None).await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<&str> = json.as_array().unwrap().iter().map(|r| r["app_bundle_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["com.alpha", "com.beta", "com.gamma"]);

    let (_, json) = send(&app, "GET", "/api/v1/apps?sort=tracker_request_share", None).await;
    assert_eq!(json[0]["app_bundle_id"], "com.alpha");
    assert!((json[0]["tracker_request_share"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);

    let (_, json) = send(&app, "GET", "/api/v1/apps?sort=avg_req_per_min&order=asc&ids=com.alpha,com.beta", None).await;
    let rates: Vec<f64> = json.as_array().unwrap().iter().map(|r| r["avg_req_per_min"].as_f64().unwrap()).collect();
    assert_eq!(rates, [1.0, 3.0]);

    assert_eq!(send(&app, "GET", "/api/v1/apps?order=sideways", None).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(send(&app, "GET", "/api/v1/apps?ids=com.nope", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(send(&app, "GET", "/api/v1/nothing", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn groups_by_app_list_and_by_tag() {
    let (app, _) = fixture().await;
    let body = json!({"name": "pair", "members": {"apps": ["com.alpha", "com.beta", "com.missing"]}}).to_string();
    let (status, group) = send(&app, "POST", "/api/v1/groups", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED);
    let (status, report) = send(&app, "GET", &format!("/api/v1/groups/{}", group["id"].as_str().unwrap()), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["missing"], json!(["com.missing"]));
    let rate = report["metrics"].as_array().unwrap().iter().find(|m| m["metric"] == "avg_req_per_min").unwrap();
    assert_eq!((rate["min"].as_f64(), rate["avg"].as_f64(), rate["max"].as_f64()), (Some(1.0), Some(2.0), Some(3.0)));

    let (_, group) = send(&app, "POST", "/api/v1/groups", Some(json!({"name": "old", "members": {"tag": "ios13"}}).to_string())).await;
    let (_, report) = send(&app, "GET", &format!("/api/v1/groups/{}", group["id"].as_str().unwrap()), None).await;
    assert_eq!(report["apps"].as_array().unwrap().len(), 1);
    assert_eq!(report["apps"][0]["recording_count"], 1);

    let (_, group) = send(&app, "POST", "/api/v1/groups", Some(json!({"name": "none", "members": {"apps": ["com.x"]}}).to_string())).await;
    let (status, json) = send(&app, "GET", &format!("/api/v1/groups/{}", group["id"].as_str().unwrap()), None).await;
    assert_eq!((status, json["error"].as_str()), (StatusCode::BAD_REQUEST, Some("empty_group")));

    let bad = json!({"name": "x", "members": {"apps": []}, "extra": 1}).to_string();
    assert_eq!(send(&app, "POST", "/api/v1/groups", Some(bad)).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(send(&app, "GET", "/api/v1/groups/unknown", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn cohort_diff_and_missing_cohort() {
    let (app, _) = fixture().await;
    let (status, diff) = send(&app, "GET", "/api/v1/apps/com.alpha/diff?a=ios13&b=ios14", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(diff["tag_a"], "ios13");
    // a cohort with one recording prunes everything
    assert_eq!(diff["report_a"]["low_confidence"], true);

    let (status, json) = send(&app, "GET", "/api/v1/apps/com.alpha/diff?a=ios13&b=ios15", None).await;
    assert_eq!((status, json["error"].as_str()), (StatusCode::NOT_FOUND, Some("missing_cohort")));
    assert_eq!(send(&app, "GET", "/api/v1/apps/com.alpha/diff?a=ios13", None).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn candidates_and_cooccurrence() {
    let (app, ids) = fixture().await;
    let (status, json) = send(&app, "GET", "/api/v1/trackers/candidates?min_apps=2", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json, json!([]));
    assert_eq!(send(&app, "GET", "/api/v1/trackers/candidates?min_apps=1", None).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(send(&app, "GET", "/api/v1/trackers/candidates?min_apps=two", None).await.0, StatusCode::BAD_REQUEST);

    let uri = format!("/api/v1/cooccurrence?recording={}&domain=api.alpha.example&window=5", ids[0]);
    let (status, rows) = send(&app, "GET", &uri, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(rows[0]["domain"], "googleads.g.doubleclick.net");
    assert_eq!(rows[0]["n"], 1);
    assert!((rows[0]["mean_dt_s"].as_f64().unwrap() - 2.0).abs() < 1e-12);

    let uri = format!("/api/v1/cooccurrence?recording={}&domain=absent.example&window=5", ids[0]);
    let (status, json) = send(&app, "GET", &uri, None).await;
    assert_eq!((status, json["error"].as_str()), (StatusCode::NOT_FOUND, Some("target_not_found")));
    let (status, _) = send(&app, "GET", "/api/v1/cooccurrence?recording=nope&domain=a.example&window=5", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let uri = format!("/api/v1/cooccurrence?recording={}&domain=api.alpha.example", ids[0]);
    assert_eq!(send(&app, "GET", &uri, None).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn recordings_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let app = api::router(Arc::new(Aggregator::open(dir.path(), trackers()).unwrap()));
    for _ in 0..2 {
        upload(&app, doc("com.alpha", &[], 60, &[(0, "api.alpha.example")])).await;
    }
    let (_, group) = send(&app, "POST", "/api/v1/groups", Some(json!({"name": "g", "members": {"tag": "t"}}).to_string())).await;

    let reopened = api::router(Arc::new(Aggregator::open(dir.path(), trackers()).unwrap()));
    let (status, detail) = send(&reopened, "GET", "/api/v1/apps/com.alpha", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(detail["report"]["recording_count"], 2);
    let (status, _) = send(&reopened, "GET", &format!("/api/v1/groups/{}", group["id"].as_str().unwrap()), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "tag group with no recordings is empty");
}

mod support;

use std::sync::Arc;
use std::time::Duration;

use appwatch_core::clock::SystemClock;
use appwatch_core::dns::{FilterSet, ProxyConfig};
use appwatch_core::logstore::{parse_export, LogStore};
use appwatch_core::monitor::{self, MonitorConfig, MonitorHandle};
use hickory_proto::op::ResponseCode;
use serde_json::{json, Value};
use support::{http, udp_query, SseClient, StubResolver};

async fn start(stub: &StubResolver, filters_path: Option<std::path::PathBuf>) -> MonitorHandle {
    let filters = match &filters_path {
        Some(p) => FilterSet::load(p).unwrap(),
        None => FilterSet::new(),
    };
    let config = MonitorConfig {
        proxy: ProxyConfig { listen: "127.0.0.1:0".parse().unwrap(), upstream: stub.addr, timeout: Duration::from_secs(2) },
        control: "127.0.0.1:0".parse().unwrap(),
        filters_path,
        ..MonitorConfig::default()
    };
    monitor::start(config, LogStore::in_memory(Arc::new(SystemClock)), filters).await.unwrap()
}

fn parse(body: &str) -> Value {
    serde_json::from_str(body).unwrap_or_else(|e| panic!("{e}: {body:?}"))
}

#[tokio::test]
async fn stream_reports_queries_and_recording_changes() {
    let stub = StubResolver::start().await;
    let handle = start(&stub, None).await;
    let mut sse = SseClient::connect(handle.control_addr(), "/local/v1/stream").await;

    udp_query(handle.dns_addr(), 7, "api.example.com").await;
    let (event, data) = sse.next().await;
    assert_eq!(event, None);
    let entry = parse(&data);
    assert_eq!(entry["qname"], "api.example.com");
    assert_eq!(entry["blocked"], false);
    assert!(entry["ts"].as_i64().unwrap() > 1_600_000_000);
    assert_eq!(entry.as_object().unwrap().len(), 3);

    let (status, body) = http(handle.control_addr(), "POST", "/local/v1/recording/start", Some(r#"{"app":"com.example.app","tags":["ios14"]}"#)).await;
    assert_eq!(status, 201, "{body}");
    let (event, data) = sse.next().await;
    assert_eq!(event.as_deref(), Some("recording"));
    assert_eq!(parse(&data)["state"], "active");

    http(handle.control_addr(), "POST", "/local/v1/recording/stop", None).await;
    let (event, data) = sse.next().await;
    assert_eq!(event.as_deref(), Some("recording"));
    assert_eq!(parse(&data)["state"], "stopped");
    handle.shutdown().await;
}

#[tokio::test]
async fn filters_endpoint_round_trip() {
    let stub = StubResolver::start().await;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("filters.json");
    let handle = start(&stub, Some(path.clone())).await;
    let ctl = handle.control_addr();

    let (status, body) = http(ctl, "GET", "/local/v1/filters", None).await;
    assert_eq!(status, 200);
    assert_eq!(parse(&body), json!({"suspended": false, "rules": []}));

    let rule = r#"{"pattern":"unity3d.com","mode":"block","include_subdomains":true}"#;
    assert_eq!(http(ctl, "POST", "/local/v1/filters", Some(rule)).await.0, 201);
    assert_eq!(http(ctl, "POST", "/local/v1/filters", Some(rule)).await.0, 200);
    assert_eq!(http(ctl, "POST", "/local/v1/filters", Some(r#"{"pattern":"bad name","mode":"block"}"#)).await.0, 400);

    let r = udp_query(handle.dns_addr(), 9, "config.unity3d.com").await;
    assert_eq!(r.response_code(), ResponseCode::NXDomain);
    assert!(FilterSet::load(&path).unwrap().len() == 1, "rule not persisted");

    let (_, body) = http(ctl, "GET", "/local/v1/filters", None).await;
    assert_eq!(parse(&body)["rules"][0]["pattern"], "unity3d.com");

    http(ctl, "POST", "/local/v1/recording/start", Some(r#"{"app":"com.example.app"}"#)).await;
    let (_, body) = http(ctl, "GET", "/local/v1/filters", None).await;
    assert_eq!(parse(&body)["suspended"], true);
    http(ctl, "POST", "/local/v1/recording/stop", None).await;

    assert_eq!(http(ctl, "DELETE", "/local/v1/filters?pattern=unity3d.com", None).await.0, 204);
    assert_eq!(http(ctl, "DELETE", "/local/v1/filters?pattern=unity3d.com", None).await.0, 404);
    assert_eq!(http(ctl, "DELETE", "/local/v1/filters", None).await.0, 400);
    let r = udp_query(handle.dns_addr(), 10, "config.unity3d.com").await;
    assert_eq!(r.response_code(), ResponseCode::NoError);
    assert!(FilterSet::load(&path).unwrap().is_empty());
    handle.shutdown().await;
}

#[tokio::test]
async fn session_lifecycle_over_control_api() {
    let stub = StubResolver::start().await;
    let handle = start(&stub, None).await;
    let ctl = handle.control_addr();

    assert_eq!(http(ctl, "POST", "/local/v1/recording/stop", None).await.0, 409);
    let (status, body) = http(ctl, "POST", "/local/v1/recording/start", Some(r#"{"app":"com.example.app"}"#)).await;
    assert_eq!(status, 201);
    let id = parse(&body)["id"].as_str().unwrap().to_owned();
    assert_eq!(http(ctl, "POST", "/local/v1/recording/start", Some(r#"{"app":"com.other"}"#)).await.0, 409);
    assert_eq!(http(ctl, "POST", "/local/v1/recording/start", Some("{}")).await.0, 400);

    for (i, name) in ["a.example.com", "b.example.com", "a.example.com"].iter().enumerate() {
        udp_query(handle.dns_addr(), i as u16, name).await;
    }
    let store = Arc::clone(handle.store());
    assert!(support::eventually(|| store.lock().unwrap().active_session().unwrap().entries.len() == 3).await);

    let (_, body) = http(ctl, "GET", "/local/v1/recording", None).await;
    assert_eq!(parse(&body)["active"], true);
    http(ctl, "POST", "/local/v1/recording/stop", None).await;

    let (status, body) = http(ctl, "GET", &format!("/local/v1/sessions/{}", &id[..6]), None).await;
    assert_eq!(status, 200);
    let detail = parse(&body);
    assert_eq!(detail["requests"], 3);
    assert_eq!(detail["names"][0], json!({"qname": "a.example.com", "count": 2}));

    let (status, body) = http(ctl, "POST", &format!("/local/v1/sessions/{id}/sanitize"), Some(r#"{"remove":["b.example.com"]}"#)).await;
    assert_eq!(status, 200);
    assert_eq!(parse(&body)["distinct_names"], 1);

    let (status, body) = http(ctl, "GET", "/local/v1/export", None).await;
    assert_eq!(status, 200);
    let state = parse_export(&body).unwrap();
    assert_eq!(state.sessions.len(), 1);
    assert_eq!(state.sessions[0].entries.len(), 2);

    assert_eq!(http(ctl, "POST", &format!("/local/v1/sessions/{id}/uploaded"), None).await.0, 200);
    let (_, body) = http(ctl, "GET", "/local/v1/sessions", None).await;
    assert_eq!(parse(&body)[0]["state"], "uploaded");
    assert_eq!(http(ctl, "DELETE", &format!("/local/v1/sessions/{id}"), None).await.0, 204);
    assert_eq!(http(ctl, "GET", &format!("/local/v1/sessions/{id}"), None).await.0, 404);
    handle.shutdown().await;
}

mod common;

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use sbc_server::api::{distance_score, router, AppState};
use sbc_server::config::ServerConfig;

struct Fixture {
    _dir: tempfile::TempDir,
    app: Router,
    query: Vec<f32>,
}

fn fixture_with(sidecar: Option<String>) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = common::toy_pipeline(dir.path(), 400);
    let mut cfg = ServerConfig::load(&cfg_path).unwrap();
    cfg.sidecar_url = sidecar;
    let state = AppState::from_config(&cfg).unwrap();
    let app = router(Arc::new(state), &cfg.cors_origins);
    let query = common::first_embedding(dir.path());
    Fixture { _dir: dir, app, query }
}

fn fixture() -> Fixture {
    fixture_with(None)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, _, bytes) = call_raw(app, method, uri, body.map(|b| b.to_string())).await;
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, v)
}

async fn call_raw(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<String>,
) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header(header::CONTENT_TYPE, "application/json");
    }
    let req = req.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, bytes)
}

fn ids(v: &Value) -> Vec<u64> {
    v["results"].as_array().unwrap().iter().map(|r| r["id"].as_u64().unwrap()).collect()
}

#[tokio::test]
async fn lists_datasets() {
    let f = fixture();
    let (status, v) = call(&f.app, "GET", "/datasets", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["version"], 1);
    assert_eq!(v["datasets"], json!([{"name": "toy", "n": 400, "dim": 32, "input_dim": 512}]));
}

#[tokio::test]
async fn search_by_embedding_finds_the_item_itself() {
    let f = fixture();
    for exact in [false, true] {
        let body = json!({"dataset": "toy", "query": {"embedding": f.query}, "k": 7, "exact": exact});
        let (status, v) = call(&f.app, "POST", "/search", Some(body)).await;
        assert_eq!(status, StatusCode::OK, "{v}");
        assert_eq!(v["version"], 1);
        assert_eq!(ids(&v).len(), 7);
        assert_eq!(ids(&v)[0], 0);
        assert_eq!(v["results"][0]["score"], 1.0);
        assert_eq!(v["results"][0]["uri"], "images/item-0.svg");
        assert_eq!(v["stats"]["exact"], exact);
        let scores: Vec<f64> = v["results"].as_array().unwrap().iter().map(|r| r["score"].as_f64().unwrap()).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[tokio::test]
async fn search_rejects_bad_requests() {
    let f = fixture();
    let cases = [
        (json!({"dataset": "nope", "query": {"embedding": f.query}}), StatusCode::NOT_FOUND),
        (json!({"dataset": "toy", "query": {"embedding": [1.0, 2.0]}}), StatusCode::BAD_REQUEST),
        (json!({"dataset": "toy", "query": {}}), StatusCode::BAD_REQUEST),
        (json!({"dataset": "toy", "query": {"embedding": f.query, "text": "x"}}), StatusCode::BAD_REQUEST),
        (json!({"dataset": "toy", "query": {"embedding": f.query}, "k": 0}), StatusCode::BAD_REQUEST),
        (json!({"dataset": "toy", "query": {"embedding": f.query}, "extra": 1}), StatusCode::BAD_REQUEST),
    ];
    for (body, want) in cases {
        let (status, v) = call(&f.app, "POST", "/search", Some(body)).await;
        assert_eq!(status, want, "{v}");
        assert_eq!(v["version"], 1);
        assert_eq!(v["error"]["status"], want.as_u16());
        assert!(!v["error"]["message"].as_str().unwrap().is_empty());
    }
    let (status, _, _) = call_raw(&f.app, "POST", "/search", Some("{not json".into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn text_query_without_sidecar_is_unavailable() {
    let f = fixture();
    let (status, v) = call(&f.app, "POST", "/search", Some(json!({"dataset": "toy", "query": {"text": "a red square"}}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert!(v["error"]["message"].as_str().unwrap().contains("sidecar_url"));
}

#[tokio::test]
async fn text_query_with_unreachable_sidecar_is_unavailable() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let f = fixture_with(Some(format!("http://127.0.0.1:{port}")));
    let (status, _) = call(&f.app, "POST", "/search", Some(json!({"dataset": "toy", "query": {"text": "x"}}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn text_query_is_embedded_by_the_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = common::toy_pipeline(dir.path(), 400);
    let query = common::first_embedding(dir.path());
    let sidecar = Router::new().route(
        "/embed_text",
        post(move |Json(body): Json<Value>| {
            let query = query.clone();
            async move {
                if body["text"] == "first" {
                    Ok(Json(json!({"embedding": query})))
                } else {
                    Err((StatusCode::BAD_REQUEST, "unsupported text"))
                }
            }
        }),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, sidecar).await.unwrap() });

    let mut cfg = ServerConfig::load(&cfg_path).unwrap();
    cfg.sidecar_url = Some(format!("http://{addr}/"));
    let app = router(Arc::new(AppState::from_config(&cfg).unwrap()), &[]);
    let (status, v) = call(&app, "POST", "/search", Some(json!({"dataset": "toy", "query": {"text": "first"}, "k": 3}))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(ids(&v)[0], 0);
    let (status, _) = call(&app, "POST", "/search", Some(json!({"dataset": "toy", "query": {"text": "other"}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

fn finetune_body(labels: Value) -> Value {
    json!({"dataset": "toy", "labels": labels, "negative_samples": 100, "seed": 3})
}

#[tokio::test]
async fn finetune_returns_results_and_is_deterministic() {
    let f = fixture();
    let body = finetune_body(json!([{"id": 0, "label": "pos"}, {"id": 1, "label": "neg"}]));
    let (status, a) = call(&f.app, "POST", "/finetune", Some(body.clone())).await;
    assert_eq!(status, StatusCode::OK, "{a}");
    assert_eq!(a["version"], 1);
    assert_eq!(a["stats"]["iteration"], 1);
    assert_eq!(a["stats"]["labeled_positives"], 1);
    assert_eq!(a["stats"]["labeled_negatives"], 1);
    assert_eq!(a["stats"]["random_negatives"], 100);
    assert_eq!(a["stats"]["model_kind"], "dbranch");
    assert!(!ids(&a).contains(&0) && !ids(&a).contains(&1));
    let (_, b) = call(&f.app, "POST", "/finetune", Some(body)).await;
    assert_ne!(a["session_id"], b["session_id"]);
    assert_eq!(a["results"], b["results"]);
}

#[tokio::test]
async fn finetune_session_accumulates_labels() {
    let f = fixture();
    let (_, first) =
        call(&f.app, "POST", "/finetune", Some(finetune_body(json!([{"id": 0, "label": "pos"}, {"id": 1, "label": "neg"}])))).await;
    let sid = first["session_id"].clone();
    let mut body = finetune_body(json!([{"id": 2, "label": "pos"}, {"id": 1, "label": "pos"}, {"id": 3, "label": "neg"}]));
    body["session_id"] = sid.clone();
    body["model"] = json!("dbranch_ensemble");
    let (status, second) = call(&f.app, "POST", "/finetune", Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{second}");
    assert_eq!(second["session_id"], sid);
    assert_eq!(second["stats"]["iteration"], 2);
    assert_eq!(second["stats"]["labeled_positives"], 3);
    assert_eq!(second["stats"]["labeled_negatives"], 1);
    assert_eq!(second["stats"]["model_kind"], "dbranch_ensemble");
    for id in [0, 1, 2, 3] {
        assert!(!ids(&second).contains(&id));
    }
}

#[tokio::test]
async fn finetune_rejects_bad_requests() {
    let f = fixture();
    let ok_labels = json!([{"id": 0, "label": "pos"}, {"id": 1, "label": "neg"}]);
    let mut unknown_model = finetune_body(ok_labels.clone());
    unknown_model["model"] = json!("svm");
    let mut unknown_session = finetune_body(ok_labels.clone());
    unknown_session["session_id"] = json!("missing");
    let mut bad_weight = finetune_body(ok_labels.clone());
    bad_weight["negative_weight"] = json!(0.0);
    let cases = [
        (finetune_body(json!([{"id": 0, "label": "pos"}])), StatusCode::UNPROCESSABLE_ENTITY),
        (finetune_body(json!([{"id": 0, "label": "neg"}])), StatusCode::UNPROCESSABLE_ENTITY),
        (finetune_body(json!([{"id": 0, "label": "pos"}, {"id": 99999, "label": "neg"}])), StatusCode::NOT_FOUND),
        (finetune_body(json!([{"id": 0, "label": "maybe"}])), StatusCode::BAD_REQUEST),
        (unknown_model, StatusCode::BAD_REQUEST),
        (unknown_session, StatusCode::NOT_FOUND),
        (bad_weight, StatusCode::BAD_REQUEST),
    ];
    for (body, want) in cases {
        let (status, v) = call(&f.app, "POST", "/finetune", Some(body)).await;
        assert_eq!(status, want, "{v}");
        assert_eq!(v["error"]["status"], want.as_u16());
    }
}

#[tokio::test]
async fn serves_images() {
    let f = fixture();
    let (status, headers, bytes) = call_raw(&f.app, "GET", "/image/toy/3", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers[header::CONTENT_TYPE], "image/svg+xml");
    assert!(String::from_utf8(bytes).unwrap().starts_with("<svg"));
    for uri in ["/image/toy/99999", "/image/toy/abc", "/image/nope/1", "/nowhere"] {
        let (status, v) = call(&f.app, "GET", uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(v["version"], 1);
    }
}

#[tokio::test]
async fn missing_image_file_is_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = common::toy_pipeline(dir.path(), 300);
    std::fs::remove_file(dir.path().join("images/item-5.svg")).unwrap();
    let cfg = ServerConfig::load(&cfg_path).unwrap();
    let app = router(Arc::new(AppState::from_config(&cfg).unwrap()), &[]);
    let (status, _) = call(&app, "GET", "/image/toy/5", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(Path::new(&dir.path().join("images/item-6.svg")).exists());
}

#[tokio::test]
async fn cors_preflight_is_allowed_for_configured_origins() {
    let f = fixture();
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/search")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let resp = f.app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");
}

#[test]
fn score_decreases_with_distance() {
    assert_eq!(distance_score(0.0), 1.0);
    assert!(distance_score(1.0) > distance_score(2.0));
    assert!(distance_score(1e9) > 0.0);
}

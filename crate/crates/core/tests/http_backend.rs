//! The HTTP backend against a local OpenAI-compatible stub server.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use delphi_core::backend::http::HttpBackend;
use delphi_core::backend::retry::RetryPolicy;
use delphi_core::backend::{
    Backend, BackendError, ChatRequest, EmbeddingRequest, RequestTag,
};
use delphi_core::model::ProviderSettings;
use delphi_core::persistence::{read_jsonl, JsonlWriter};
use serde_json::{json, Value};

#[derive(Clone, Default)]
struct Hits(Arc<Mutex<HashMap<String, usize>>>);

impl Hits {
    fn bump(&self, scenario: &str) -> usize {
        let mut map = self.0.lock().unwrap();
        let n = map.entry(scenario.to_string()).or_default();
        *n += 1;
        *n
    }

    fn get(&self, scenario: &str) -> usize {
        self.0.lock().unwrap().get(scenario).copied().unwrap_or(0)
    }
}

fn chat_ok(content: &str) -> Response {
    Json(json!({
        "id": "chatcmpl-1",
        "model": "stub",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 3, "completion_tokens": 1, "total_tokens": 4}
    }))
    .into_response()
}

async fn chat(
    State(hits): State<Hits>,
    Path(scenario): Path<String>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> Response {
    let n = hits.bump(&scenario);
    if headers.get("authorization").and_then(|v| v.to_str().ok()) != Some("Bearer test-key") {
        return StatusCode::UNAUTHORIZED.into_response();
    }
    match scenario.as_str() {
        "ok" => {
            let user = body["messages"][1]["content"].as_str().unwrap_or_default();
            assert_eq!(body["messages"][0]["role"], "system");
            assert_eq!(body["temperature"], 0.7);
            chat_ok(&format!("echo: {user}"))
        }
        "flaky429" if n <= 2 => StatusCode::TOO_MANY_REQUESTS.into_response(),
        "flaky429" => chat_ok("3"),
        "always429" => StatusCode::TOO_MANY_REQUESTS.into_response(),
        "always503" => StatusCode::SERVICE_UNAVAILABLE.into_response(),
        "badrequest" => (StatusCode::BAD_REQUEST, "context too long").into_response(),
        "forbidden" => StatusCode::FORBIDDEN.into_response(),
        "notjson" => (StatusCode::OK, "<html>oops</html>").into_response(),
        "nochoices" => Json(json!({"choices": []})).into_response(),
        _ => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn embeddings(
    State(hits): State<Hits>,
    Path(scenario): Path<String>,
    Json(body): Json<Value>,
) -> Response {
    hits.bump(&format!("{scenario}/embed"));
    let inputs = body["input"].as_array().cloned().unwrap_or_default();
    let mut data: Vec<Value> = inputs
        .iter()
        .enumerate()
        .map(|(i, _)| json!({"index": i, "embedding": [i as f64 + 1.0, 0.5]}))
        .collect();
    data.reverse();
    if scenario == "shortembed" {
        data.pop();
    }
    Json(json!({"data": data, "model": "stub"})).into_response()
}

async fn serve() -> (SocketAddr, Hits) {
    let hits = Hits::default();
    let app = Router::new()
        .route("/{scenario}/chat/completions", post(chat))
        .route("/{scenario}/embeddings", post(embeddings))
        .with_state(hits.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (addr, hits)
}

fn backend(addr: SocketAddr, scenario: &str, key: Option<&str>) -> HttpBackend {
    let settings = ProviderSettings {
        base_url: format!("http://{addr}/{scenario}"),
        ..ProviderSettings::default()
    };
    HttpBackend::new(&settings, key.map(str::to_string))
        .unwrap()
        .with_retry_policy(RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(2),
            factor: 2.0,
        })
}

fn request() -> ChatRequest {
    ChatRequest {
        system_prompt: "You are an expert.".into(),
        user_prompt: "Rate this.".into(),
        temperature: 0.7,
        max_output_tokens: 16,
        tag: RequestTag::Other,
    }
}

#[tokio::test]
async fn completes_and_records_metadata() {
    let (addr, hits) = serve().await;
    let r = backend(addr, "ok", Some("test-key")).complete(&request()).await.unwrap();
    assert_eq!(r.text, "echo: Rate this.");
    assert_eq!(r.provider_metadata["model"], json!("stub"));
    assert_eq!(r.provider_metadata["usage"]["total_tokens"], json!(4));
    assert_eq!(hits.get("ok"), 1);
}

#[tokio::test]
async fn missing_key_fails_before_any_request() {
    let (addr, hits) = serve().await;
    for key in [None, Some(""), Some("   ")] {
        let err = backend(addr, "ok", key).complete(&request()).await.unwrap_err();
        assert!(matches!(err, BackendError::Auth(_)));
        let err = backend(addr, "ok", key)
            .embed(&EmbeddingRequest { texts: vec!["x".into()] })
            .await
            .unwrap_err();
        assert!(matches!(err, BackendError::Auth(_)));
    }
    assert_eq!(hits.get("ok"), 0);
    assert_eq!(hits.get("ok/embed"), 0);
}

#[tokio::test]
async fn rejected_key_is_not_retried() {
    let (addr, hits) = serve().await;
    let err = backend(addr, "ok", Some("wrong")).complete(&request()).await.unwrap_err();
    assert!(matches!(err, BackendError::Auth(_)));
    assert_eq!(hits.get("ok"), 1);
    let err = backend(addr, "forbidden", Some("test-key")).complete(&request()).await.unwrap_err();
    assert!(matches!(err, BackendError::Auth(_)));
    assert_eq!(hits.get("forbidden"), 1);
}

#[tokio::test]
async fn rate_limits_are_retried_with_backoff() {
    let (addr, hits) = serve().await;
    let r = backend(addr, "flaky429", Some("test-key")).complete(&request()).await.unwrap();
    assert_eq!(r.text, "3");
    assert_eq!(hits.get("flaky429"), 3);

    let err = backend(addr, "always429", Some("test-key")).complete(&request()).await.unwrap_err();
    assert_eq!(err, BackendError::RateLimited { attempts: 5 });
    assert_eq!(hits.get("always429"), 5);
}

#[tokio::test]
async fn server_errors_exhaust_to_unavailable() {
    let (addr, hits) = serve().await;
    let err = backend(addr, "always503", Some("test-key")).complete(&request()).await.unwrap_err();
    assert!(matches!(err, BackendError::Unavailable { attempts: 5, .. }), "{err:?}");
    assert_eq!(hits.get("always503"), 5);
}

#[tokio::test]
async fn client_errors_and_garbage_are_permanent() {
    let (addr, hits) = serve().await;
    let err = backend(addr, "badrequest", Some("test-key")).complete(&request()).await.unwrap_err();
    assert!(matches!(err, BackendError::Rejected { status: 400, .. }));
    assert_eq!(hits.get("badrequest"), 1);

    for scenario in ["notjson", "nochoices"] {
        let err = backend(addr, scenario, Some("test-key")).complete(&request()).await.unwrap_err();
        assert!(matches!(err, BackendError::MalformedProviderResponse(_)), "{scenario}");
        assert_eq!(hits.get(scenario), 1);
    }
}

#[tokio::test]
async fn unreachable_host_is_unavailable() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let err = backend(addr, "ok", Some("test-key")).complete(&request()).await.unwrap_err();
    assert!(matches!(err, BackendError::Unavailable { attempts: 5, .. }), "{err:?}");
}

#[tokio::test]
async fn embeddings_are_reordered_and_validated() {
    let (addr, _) = serve().await;
    let req = EmbeddingRequest {
        texts: vec!["a".into(), "b".into(), "c".into()],
    };
    let r = backend(addr, "ok", Some("test-key")).embed(&req).await.unwrap();
    assert_eq!(r.vectors, vec![vec![1.0, 0.5], vec![2.0, 0.5], vec![3.0, 0.5]]);
    let err = backend(addr, "shortembed", Some("test-key")).embed(&req).await.unwrap_err();
    assert!(matches!(err, BackendError::MalformedProviderResponse(_)));
}

#[tokio::test]
async fn audit_log_records_every_attempt() {
    let (addr, _) = serve().await;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("providers.jsonl");
    let log = Arc::new(JsonlWriter::open_append(&path).unwrap());
    backend(addr, "flaky429", Some("test-key"))
        .with_audit_log(log)
        .complete(&request())
        .await
        .unwrap();
    let rows = read_jsonl(&path).unwrap();
    let statuses: Vec<Value> = rows.iter().map(|r| r["status"].clone()).collect();
    assert_eq!(statuses, vec![json!(429), json!(429), json!(200)]);
    assert_eq!(rows[2]["attempt"], 2);
    assert_eq!(rows[2]["request"]["messages"][1]["content"], "Rate this.");
    assert!(!std::fs::read_to_string(&path).unwrap().contains("test-key"));
}

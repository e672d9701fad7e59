//! The chat-completions client against a local fake endpoint.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use pgim::knowledge::{generate, EngineConfig, OpenAiEngine, ResponseCache};
use pgim::promptgen::PromptDoc;
use serde_json::{json, Value};

#[derive(Clone, Default)]
struct Fake {
    calls: Arc<AtomicUsize>,
    /// Number of leading requests answered with this status.
    fail_first: usize,
    fail_status: u16,
    last_body: Arc<Mutex<Option<Value>>>,
    last_auth: Arc<Mutex<Option<String>>>,
}

async fn complete(State(f): State<Fake>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let n = f.calls.fetch_add(1, Ordering::SeqCst);
    *f.last_auth.lock().unwrap() = headers
        .get("authorization")
        .map(|v| v.to_str().unwrap().to_string());
    let prompt = body["messages"][0]["content"].as_str().unwrap_or("").to_string();
    *f.last_body.lock().unwrap() = Some(body);
    if n < f.fail_first {
        let status = StatusCode::from_u16(f.fail_status).unwrap();
        return (status, Json(json!({"error": {"message": "try later"}})));
    }
    let words = prompt.split_whitespace().count();
    (
        StatusCode::OK,
        Json(json!({
            "id": "cmpl-1",
            "created": 1_700_000_000u64,
            "choices": [{"index": 0, "message": {"role": "assistant", "content": format!("prompt had {words} words")}}]
        })),
    )
}

fn serve(fake: Fake) -> SocketAddr {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(1)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let app = Router::new()
                .route("/v1/chat/completions", post(complete))
                .with_state(fake);
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    rx.recv().unwrap()
}

fn config(addr: SocketAddr, key_env: &str) -> EngineConfig {
    EngineConfig {
        endpoint: format!("http://{addr}/v1"),
        backoff_ms: 1,
        timeout_secs: 10,
        api_key_env: key_env.to_string(),
        ..EngineConfig::default()
    }
}

fn prompt() -> PromptDoc {
    PromptDoc::new("Text: alice visited paris\nAnswer: ".into(), 0, "s:0")
}

#[test]
fn round_trip_and_cache() {
    let fake = Fake::default();
    let addr = serve(fake.clone());
    std::env::set_var("PGIM_TEST_KEY_A", "sk-test");
    let cfg = config(addr, "PGIM_TEST_KEY_A");
    let engine = OpenAiEngine::new(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(dir.path()).unwrap();

    let k = generate(&prompt(), &cfg, &engine, &cache).unwrap();
    assert_eq!(k.content, "prompt had 5 words");
    assert_eq!(k.m, 4);
    assert_eq!(k.timestamp, 1_700_000_000);
    assert_eq!(k.prompt_hash, prompt().content_hash);

    let body = fake.last_body.lock().unwrap().clone().unwrap();
    assert_eq!(body["model"], "gpt-3.5-turbo");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"].as_array().unwrap().len(), 1);
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], prompt().text);
    assert_eq!(fake.last_auth.lock().unwrap().as_deref(), Some("Bearer sk-test"));

    // A second request for the same prompt is served from the cache.
    let again = generate(&prompt(), &cfg, &engine, &cache).unwrap();
    assert_eq!(again, k);
    assert_eq!(fake.calls.load(Ordering::SeqCst), 1);
}

#[test]
fn rate_limits_are_retried() {
    let fake = Fake {
        fail_first: 2,
        fail_status: 429,
        ..Fake::default()
    };
    let addr = serve(fake.clone());
    let cfg = config(addr, "PGIM_TEST_KEY_UNSET");
    let engine = OpenAiEngine::new(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(dir.path()).unwrap();
    let k = generate(&prompt(), &cfg, &engine, &cache).unwrap();
    assert_eq!(k.content, "prompt had 5 words");
    assert_eq!(fake.calls.load(Ordering::SeqCst), 3);
    assert_eq!(fake.last_auth.lock().unwrap().as_deref(), None);

    // Too few attempts: the error surfaces and nothing is cached.
    let fake = Fake {
        fail_first: 10,
        fail_status: 503,
        ..Fake::default()
    };
    let addr = serve(fake.clone());
    let cfg = EngineConfig {
        max_attempts: 2,
        ..config(addr, "PGIM_TEST_KEY_UNSET")
    };
    let engine = OpenAiEngine::new(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(dir.path()).unwrap();
    assert!(generate(&prompt(), &cfg, &engine, &cache).is_err());
    assert_eq!(fake.calls.load(Ordering::SeqCst), 2);
    assert!(cache.is_empty().unwrap());
}

#[test]
fn client_errors_are_fatal() {
    let fake = Fake {
        fail_first: 10,
        fail_status: 400,
        ..Fake::default()
    };
    let addr = serve(fake.clone());
    let cfg = config(addr, "PGIM_TEST_KEY_UNSET");
    let engine = OpenAiEngine::new(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(dir.path()).unwrap();
    let err = generate(&prompt(), &cfg, &engine, &cache).unwrap_err();
    assert!(err.to_string().contains("400"), "{err}");
    assert_eq!(fake.calls.load(Ordering::SeqCst), 1);
}

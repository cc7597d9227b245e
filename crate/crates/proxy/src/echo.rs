//! An upstream that answers with the prompt it was sent.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use serde_json::{json, Value};

/// Chat-completions body whose single choice repeats the newest user message.
pub fn echo_response(request: &Value) -> Vec<u8> {
    let content = request["messages"]
        .as_array()
        .and_then(|ms| {
            ms.iter()
                .rev()
                .find(|m| m["role"] == "user")
                .and_then(|m| m["content"].as_str())
        })
        .unwrap_or("");
    let model = request["model"].as_str().unwrap_or("echo");
    serde_json::to_vec(&json!({
        "object": "chat.completion",
        "model": model,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": content},
            "finish_reason": "stop"
        }]
    }))
    .expect("JSON values serialize")
}

fn answer(body: &[u8]) -> (StatusCode, Vec<u8>) {
    match serde_json::from_slice::<Value>(body) {
        Ok(v) => (StatusCode::OK, echo_response(&v)),
        Err(e) => (
            StatusCode::BAD_REQUEST,
            json!({"error": {"message": e.to_string()}}).to_string().into_bytes(),
        ),
    }
}

fn json_response(status: StatusCode, body: Vec<u8>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

/// Stand-alone echo server exposing `POST /v1/chat/completions`.
pub fn echo_router() -> Router {
    Router::new().route(
        "/v1/chat/completions",
        post(|body: Bytes| async move {
            let (status, body) = answer(&body);
            json_response(status, body)
        }),
    )
}

/// Echo server that keeps every request and response body it handled.
#[derive(Clone, Default)]
pub struct RecordingEcho {
    exchanges: Arc<Mutex<Vec<(Vec<u8>, Vec<u8>)>>>,
    delay: Duration,
}

impl RecordingEcho {
    pub fn new() -> Self {
        Self::default()
    }

    /// Wait `delay` before answering each request.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/v1/chat/completions", post(record))
            .with_state(self.clone())
    }

    /// `(request body, response body)` pairs, in completion order.
    pub fn exchanges(&self) -> Vec<(Vec<u8>, Vec<u8>)> {
        self.exchanges.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

async fn record(State(echo): State<RecordingEcho>, body: Bytes) -> Response {
    if !echo.delay.is_zero() {
        tokio::time::sleep(echo.delay).await;
    }
    let (status, out) = answer(&body);
    echo.exchanges
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .push((body.to_vec(), out.clone()));
    json_response(status, out)
}

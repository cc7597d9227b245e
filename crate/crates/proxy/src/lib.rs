//! A chat-completions gateway that abstracts the newest user message before
//! forwarding the request upstream.
//!
//! The upstream answer is relayed byte for byte. Every request is metered in
//! a [`Ledger`]: the client is charged for the prompt it sent, the upstream
//! charges for the prompt it received, and the difference is the margin.
//!
//! Endpoints:
//!
//! - `POST /v1/chat/completions`
//! - `GET /report?from=<rfc3339>&to=<rfc3339>`
//! - `GET /healthz`

mod echo;

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use mondrian_core::pricing::{
    CostRecord, Ledger, MarginReport, PricingModel, PricingUnit, RecordStatus, Window,
};
use mondrian_core::{Abstractor, Vocabulary};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tracing::{info, warn};

pub use echo::{echo_response, echo_router, RecordingEcho};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestTemplate {
    /// Forward over HTTP to `{base_url}/v1/chat/completions`.
    #[default]
    ChatCompletions,
    /// Answer in-process with the forwarded prompt.
    Echo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpstreamSpec {
    #[serde(default)]
    pub base_url: String,
    #[serde(default)]
    pub request_template: RequestTemplate,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token_ref: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    60_000
}

impl UpstreamSpec {
    pub fn echo() -> Self {
        UpstreamSpec {
            base_url: String::new(),
            request_template: RequestTemplate::Echo,
            auth_token_ref: None,
            timeout_ms: default_timeout_ms(),
        }
    }

    pub fn chat(base_url: impl Into<String>) -> Self {
        UpstreamSpec {
            base_url: base_url.into(),
            request_template: RequestTemplate::ChatCompletions,
            auth_token_ref: None,
            timeout_ms: default_timeout_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), ProxyError> {
        match self.request_template {
            RequestTemplate::Echo if self.auth_token_ref.is_some() => {
                Err(ProxyError::Config("an echo upstream takes no auth token".into()))
            }
            RequestTemplate::ChatCompletions if self.base_url.trim().is_empty() => {
                Err(ProxyError::Config("upstream base_url is required".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("upstream timed out")]
    UpstreamTimeout,
    #[error("upstream failed: {0}")]
    Upstream(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("ledger: {0}")]
    Ledger(#[from] mondrian_core::pricing::LedgerError),
}

impl ProxyError {
    fn status(&self) -> StatusCode {
        match self {
            ProxyError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ProxyError::UpstreamTimeout => StatusCode::GATEWAY_TIMEOUT,
            ProxyError::Upstream(_) => StatusCode::BAD_GATEWAY,
            ProxyError::Config(_) | ProxyError::Ledger(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ProxyError {
    fn into_response(self) -> Response {
        let kind = match self {
            ProxyError::BadRequest(_) => "invalid_request_error",
            ProxyError::UpstreamTimeout => "upstream_timeout",
            ProxyError::Upstream(_) => "upstream_error",
            ProxyError::Config(_) | ProxyError::Ledger(_) => "server_error",
        };
        let body = json!({"error": {"message": self.to_string(), "type": kind}});
        (self.status(), Json(body)).into_response()
    }
}

/// Everything a request handler needs. Cheap to clone.
#[derive(Clone)]
pub struct ProxyState {
    inner: Arc<Inner>,
}

struct Inner {
    abstractor: Option<Abstractor>,
    vocab: Arc<Vocabulary>,
    user_pricing: PricingModel,
    upstream_pricing: PricingModel,
    upstream: UpstreamSpec,
    token: Option<String>,
    client: reqwest::Client,
    ledger: Ledger,
}

impl ProxyState {
    /// `abstractor: None` forwards every prompt unmodified.
    pub fn new(
        abstractor: Option<Abstractor>,
        vocab: Arc<Vocabulary>,
        user_pricing: PricingModel,
        upstream_pricing: PricingModel,
        upstream: UpstreamSpec,
        ledger: Ledger,
    ) -> Result<Self, ProxyError> {
        upstream.validate()?;
        for model in [&user_pricing, &upstream_pricing] {
            model.validate().map_err(|e| ProxyError::Config(e.to_string()))?;
        }
        let token = match &upstream.auth_token_ref {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| ProxyError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(upstream.timeout_ms))
            .build()
            .map_err(|e| ProxyError::Config(e.to_string()))?;
        Ok(ProxyState {
            inner: Arc::new(Inner {
                abstractor,
                vocab,
                user_pricing,
                upstream_pricing,
                upstream,
                token,
                client,
                ledger,
            }),
        })
    }

    pub fn ledger(&self) -> &Ledger {
        &self.inner.ledger
    }
}

pub fn router(state: ProxyState) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat_completions))
        .route("/report", get(report))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Serve until the listener fails or `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: ProxyState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

async fn healthz() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

#[derive(Debug, Deserialize)]
struct ReportQuery {
    from: Option<String>,
    to: Option<String>,
}

fn parse_time(s: Option<&str>) -> Result<Option<DateTime<Utc>>, ProxyError> {
    s.map(|s| {
        DateTime::parse_from_rfc3339(s)
            .map(|t| t.with_timezone(&Utc))
            .map_err(|e| ProxyError::BadRequest(format!("bad timestamp {s:?}: {e}")))
    })
    .transpose()
}

async fn report(
    State(state): State<ProxyState>,
    Query(q): Query<ReportQuery>,
) -> Result<Json<MarginReport>, ProxyError> {
    let window = Window {
        from: parse_time(q.from.as_deref())?,
        to: parse_time(q.to.as_deref())?,
    };
    Ok(Json(state.inner.ledger.report(window)))
}

/// Index of the last user message and its text.
fn target_message(body: &Value) -> Result<(usize, String), ProxyError> {
    let obj = body
        .as_object()
        .ok_or_else(|| ProxyError::BadRequest("body must be a JSON object".into()))?;
    if obj.get("stream").and_then(Value::as_bool) == Some(true) {
        return Err(ProxyError::BadRequest("streaming is not supported".into()));
    }
    let messages = obj
        .get("messages")
        .and_then(Value::as_array)
        .ok_or_else(|| ProxyError::BadRequest("messages must be an array".into()))?;
    let (index, message) = messages
        .iter()
        .enumerate()
        .rev()
        .find(|(_, m)| m.get("role").and_then(Value::as_str) == Some("user"))
        .ok_or_else(|| ProxyError::BadRequest("no user message".into()))?;
    let content = message
        .get("content")
        .and_then(Value::as_str)
        .ok_or_else(|| ProxyError::BadRequest("user message content must be a string".into()))?;
    Ok((index, content.to_string()))
}

fn prompt_units(body: &Value, unit: PricingUnit, vocab: &Vocabulary) -> u64 {
    body["messages"]
        .as_array()
        .into_iter()
        .flatten()
        .filter_map(|m| m.get("content").and_then(Value::as_str))
        .map(|c| unit.count(c, vocab))
        .sum()
}

fn completion_text(body: &[u8]) -> String {
    serde_json::from_slice::<Value>(body)
        .ok()
        .and_then(|v| {
            v["choices"].as_array().map(|choices| {
                choices
                    .iter()
                    .filter_map(|c| c.pointer("/message/content").and_then(Value::as_str))
                    .collect::<String>()
            })
        })
        .unwrap_or_default()
}

struct Upstreamed {
    status: StatusCode,
    content_type: Option<HeaderValue>,
    body: Bytes,
}

async fn forward(inner: &Inner, body: &Value) -> Result<Upstreamed, ProxyError> {
    match inner.upstream.request_template {
        RequestTemplate::Echo => Ok(Upstreamed {
            status: StatusCode::OK,
            content_type: Some(HeaderValue::from_static("application/json")),
            body: Bytes::from(echo_response(body)),
        }),
        RequestTemplate::ChatCompletions => {
            let url = format!(
                "{}/v1/chat/completions",
                inner.upstream.base_url.trim_end_matches('/')
            );
            let mut req = inner.client.post(url).json(body);
            if let Some(token) = &inner.token {
                req = req.bearer_auth(token);
            }
            let resp = req.send().await.map_err(classify)?;
            let status = StatusCode::from_u16(resp.status().as_u16()).unwrap_or(StatusCode::BAD_GATEWAY);
            let content_type = resp
                .headers()
                .get(reqwest::header::CONTENT_TYPE)
                .and_then(|v| HeaderValue::from_bytes(v.as_bytes()).ok());
            let body = resp.bytes().await.map_err(classify)?;
            Ok(Upstreamed {
                status,
                content_type,
                body,
            })
        }
    }
}

fn classify(e: reqwest::Error) -> ProxyError {
    if e.is_timeout() {
        ProxyError::UpstreamTimeout
    } else {
        ProxyError::Upstream(e.to_string())
    }
}

async fn chat_completions(State(state): State<ProxyState>, body: Bytes) -> Result<Response, ProxyError> {
    let received_at = Utc::now();
    let request_id = uuid::Uuid::new_v4().to_string();
    let inner = &*state.inner;
    let mut request: Value =
        serde_json::from_slice(&body).map_err(|e| ProxyError::BadRequest(format!("invalid JSON: {e}")))?;
    let (index, prompt) = target_message(&request)?;
    let original = request.clone();

    let mut passed_through = true;
    if let Some(abstractor) = inner.abstractor.clone() {
        let text = prompt.clone();
        match tokio::task::spawn_blocking(move || abstractor.abstract_query(&text)).await {
            Ok(result) => {
                if let Some(w) = &result.warning {
                    warn!(%request_id, warning = %w, "abstraction passed through");
                }
                passed_through = result.passed_through;
                request["messages"][index]["content"] = Value::String(result.abstracted);
            }
            Err(e) => warn!(%request_id, error = %e, "abstraction task failed; forwarding original"),
        }
    }

    let vocab = &inner.vocab;
    let unit = inner.upstream_pricing.unit;
    let original_units = prompt_units(&original, unit, vocab);
    let abstracted_units = prompt_units(&request, unit, vocab);
    let user_units = prompt_units(&original, inner.user_pricing.unit, vocab);

    let outcome = forward(inner, &request).await;
    let completed_at = Utc::now();
    let mut record = CostRecord {
        request_id: request_id.clone(),
        received_at,
        completed_at,
        status: RecordStatus::Failed,
        passed_through,
        unit,
        original_units,
        abstracted_units,
        upstream_output_units: 0,
        user_price: Default::default(),
        upstream_cost: Default::default(),
        margin: Default::default(),
        currency: inner.user_pricing.currency.clone(),
        error: None,
    };
    let upstream = match outcome {
        Ok(u) => u,
        Err(e) => {
            record.error = Some(e.to_string());
            inner.ledger.append(record)?;
            return Err(e);
        }
    };
    if upstream.status.is_success() {
        let answer = completion_text(&upstream.body);
        let out_upstream = unit.count(&answer, vocab);
        let out_user = inner.user_pricing.unit.count(&answer, vocab);
        record.status = RecordStatus::Completed;
        record.upstream_output_units = out_upstream;
        record.user_price = inner.user_pricing.price(user_units, out_user);
        record.upstream_cost = inner.upstream_pricing.price(abstracted_units, out_upstream);
        record.margin = record.user_price - record.upstream_cost;
    } else {
        record.error = Some(format!("upstream answered {}", upstream.status));
    }
    info!(
        %request_id,
        status = upstream.status.as_u16(),
        original_units,
        abstracted_units,
        "proxied"
    );
    inner.ledger.append(record)?;

    let mut response = (upstream.status, upstream.body).into_response();
    if let Some(ct) = upstream.content_type {
        response.headers_mut().insert(header::CONTENT_TYPE, ct);
    }
    response
        .headers_mut()
        .insert("x-request-id", HeaderValue::from_str(&request_id).expect("uuid is ASCII"));
    Ok(response)
}

//! Blocking clients for the model being evaluated.

use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UpstreamError {
    #[error("upstream unreachable: {0}")]
    Unreachable(String),
    #[error("upstream answered {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unexpected upstream response: {0}")]
    Malformed(String),
}

pub trait Upstream: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, UpstreamError>;

    fn name(&self) -> &str;

    /// Identical prompts always get identical answers.
    fn deterministic(&self) -> bool {
        false
    }
}

/// Answers every prompt with the prompt itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct Echo;

impl Upstream for Echo {
    fn complete(&self, prompt: &str) -> Result<String, UpstreamError> {
        Ok(prompt.to_string())
    }

    fn name(&self) -> &str {
        "echo"
    }

    fn deterministic(&self) -> bool {
        true
    }
}

/// A chat-completions endpoint queried with a single user message.
pub struct ChatCompletions {
    url: String,
    model: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl std::fmt::Debug for ChatCompletions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChatCompletions")
            .field("url", &self.url)
            .field("model", &self.model)
            .finish_non_exhaustive()
    }
}

impl ChatCompletions {
    /// `base_url` is the server root; `/v1/chat/completions` is appended.
    pub fn new(base_url: &str, model: &str, token: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        ChatCompletions {
            url: format!("{}/v1/chat/completions", base_url.trim_end_matches('/')),
            model: model.to_string(),
            token,
            agent,
        }
    }
}

impl Upstream for ChatCompletions {
    fn complete(&self, prompt: &str) -> Result<String, UpstreamError> {
        let mut req = self.agent.post(&self.url);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(json!({
                "model": self.model,
                "messages": [{"role": "user", "content": prompt}],
            }))
            .map_err(|e| UpstreamError::Unreachable(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| UpstreamError::Malformed(e.to_string()))?;
        if status != 200 {
            return Err(UpstreamError::Status { status, body });
        }
        let value: Value = serde_json::from_str(&body).map_err(|e| UpstreamError::Malformed(e.to_string()))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| UpstreamError::Malformed("no choices[0].message.content".into()))
    }

    fn name(&self) -> &str {
        &self.url
    }
}

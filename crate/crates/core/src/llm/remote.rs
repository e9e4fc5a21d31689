use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use super::{LlmBackend, LlmError, LlmRequest};
use crate::http::{JsonPoster, DEFAULT_TIMEOUT};
use crate::util::InFlightLimiter;

pub const ENDPOINT_VAR: &str = "ARMOR_LLM_ENDPOINT";
pub const KEY_VAR: &str = "ARMOR_LLM_KEY";

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub key: Option<String>,
    pub model: Option<String>,
    pub timeout: Duration,
    pub max_in_flight: usize,
}

impl RemoteConfig {
    /// Reads the endpoint and credential from the environment.
    pub fn from_env() -> Result<Self, LlmError> {
        let endpoint = std::env::var(ENDPOINT_VAR)
            .map_err(|_| LlmError::BackendUnavailable(format!("{ENDPOINT_VAR} is not set")))?;
        Ok(Self {
            endpoint,
            key: std::env::var(KEY_VAR).ok(),
            model: None,
            timeout: DEFAULT_TIMEOUT,
            max_in_flight: 8,
        })
    }
}

/// Chat-completion client: one user message, greedy decoding.
pub struct RemoteBackend {
    config: RemoteConfig,
    poster: JsonPoster,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let poster = JsonPoster::new(config.timeout, 1, Arc::new(InFlightLimiter::new(config.max_in_flight)));
        Self { config, poster }
    }

    pub fn request_body(&self, request: &LlmRequest) -> Value {
        let mut body = json!({
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": 0,
            "do_sample": request.decoding.do_sample,
            "max_tokens": request.decoding.max_new_tokens,
        });
        if let Some(model) = &self.config.model {
            body["model"] = Value::from(model.clone());
        }
        body
    }
}

/// Pulls the assistant text out of a chat-completion reply.
pub(crate) fn completion_text(reply: &Value) -> Option<String> {
    reply
        .pointer("/choices/0/message/content")
        .or_else(|| reply.pointer("/choices/0/text"))
        .and_then(Value::as_str)
        .map(str::to_string)
}

impl LlmBackend for RemoteBackend {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let reply = self
            .poster
            .post(&self.config.endpoint, &self.request_body(request), self.config.key.as_deref())
            .map_err(|e| LlmError::BackendUnavailable(e.to_string()))?;
        completion_text(&reply).ok_or_else(|| LlmError::BackendUnavailable("reply has no message content".into()))
    }

    fn tag(&self) -> String {
        format!("remote:{}", self.config.endpoint)
    }
}

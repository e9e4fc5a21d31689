//! Chat-completion abstraction with strict JSON handling.
//!
//! Every request is rendered from one of the canonical templates and sent with
//! sampling disabled. Responses are fence-stripped, parsed, and validated
//! against the template's schema; one repair retry is allowed.

mod remote;
mod schema;
mod scripted;
mod templates;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::Serialize;
use serde_json::Value;

pub use remote::{RemoteBackend, RemoteConfig};
pub use schema::{Schema, ABSTAIN};
pub(crate) use schema::binary as schema_binary;
pub use scripted::{
    bindings_hash, scripted_lookup, RecordingBackend, Scenario, ScenarioEntry, ScenarioRegistry, ScriptedBackend,
    TableScenario,
};
pub use templates::{bindings, render_prompt, Bindings, RenderError, TemplateId};

/// Default cap on response length, in characters.
pub const DEFAULT_MAX_RESPONSE_CHARS: usize = 32_768;

const REPAIR_SUFFIX: &str = "\n\nYour previous reply could not be used. Return valid JSON only.";

/// Decoding settings. Sampling is always off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Decoding {
    pub do_sample: bool,
    pub max_new_tokens: usize,
}

impl Default for Decoding {
    fn default() -> Self {
        Self { do_sample: false, max_new_tokens: 2048 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LlmRequest {
    pub template: TemplateId,
    pub bindings: Bindings,
    pub prompt: String,
    pub decoding: Decoding,
    /// 0 for the first call, 1 for the repair retry.
    pub attempt: u8,
}

impl LlmRequest {
    pub fn new(template: TemplateId, bindings: Bindings) -> Result<Self, LlmError> {
        let prompt = render_prompt(template, &bindings)?;
        Ok(Self { template, bindings, prompt, decoding: Decoding::default(), attempt: 0 })
    }

    fn repair(&self) -> Self {
        let mut next = self.clone();
        next.prompt.push_str(REPAIR_SUFFIX);
        next.attempt = self.attempt + 1;
        next
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmResponse {
    pub raw: String,
    pub parsed: Option<Value>,
    pub backend: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LlmError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("scenario {scenario} has no response for {template}")]
    ScenarioMissing { scenario: String, template: TemplateId },
    #[error("invalid JSON after retry: {0}")]
    JsonInvalid(String),
    #[error("schema violation at `{0}`")]
    SchemaViolation(String),
    #[error("response of {len} chars exceeds cap of {cap}")]
    ResponseTooLong { len: usize, cap: usize },
    #[error(transparent)]
    Render(#[from] RenderError),
}

impl LlmError {
    /// Whether the repair retry can help.
    fn is_repairable(&self) -> bool {
        matches!(self, LlmError::JsonInvalid(_) | LlmError::SchemaViolation(_))
    }
}

/// Anything that turns a rendered request into raw text.
pub trait LlmBackend: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError>;
    fn tag(&self) -> String;
}

#[derive(Debug, Default)]
pub struct LlmStats {
    pub calls: AtomicU64,
    pub repairs: AtomicU64,
    pub failures: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LlmStatsSnapshot {
    pub calls: u64,
    pub repairs: u64,
    pub failures: u64,
}

impl LlmStats {
    pub fn snapshot(&self) -> LlmStatsSnapshot {
        LlmStatsSnapshot {
            calls: self.calls.load(Ordering::Relaxed),
            repairs: self.repairs.load(Ordering::Relaxed),
            failures: self.failures.load(Ordering::Relaxed),
        }
    }
}

/// Removes a surrounding Markdown code fence, if any.
pub fn strip_fences(raw: &str) -> &str {
    let text = raw.trim();
    let Some(after) = text.strip_prefix("```") else {
        return text;
    };
    let body = match after.find('\n') {
        Some(nl) => &after[nl + 1..],
        None => after,
    };
    body.trim_end().strip_suffix("```").unwrap_or(body).trim()
}

/// A backend plus the JSON contract shared by every caller.
#[derive(Clone)]
pub struct LlmClient {
    backend: Arc<dyn LlmBackend>,
    max_response_chars: usize,
    stats: Arc<LlmStats>,
}

impl LlmClient {
    pub fn new(backend: Arc<dyn LlmBackend>) -> Self {
        Self { backend, max_response_chars: DEFAULT_MAX_RESPONSE_CHARS, stats: Arc::default() }
    }

    pub fn with_max_response_chars(mut self, cap: usize) -> Self {
        self.max_response_chars = cap;
        self
    }

    pub fn backend_tag(&self) -> String {
        self.backend.tag()
    }

    pub fn stats(&self) -> LlmStatsSnapshot {
        self.stats.snapshot()
    }

    fn attempt(&self, request: &LlmRequest, schema: &Schema) -> Result<LlmResponse, LlmError> {
        self.stats.calls.fetch_add(1, Ordering::Relaxed);
        let raw = self.backend.complete(request)?;
        if raw.chars().count() > self.max_response_chars {
            return Err(LlmError::ResponseTooLong { len: raw.chars().count(), cap: self.max_response_chars });
        }
        let value: Value = serde_json::from_str(strip_fences(&raw)).map_err(|e| LlmError::JsonInvalid(e.to_string()))?;
        schema.validate(&value).map_err(LlmError::SchemaViolation)?;
        Ok(LlmResponse { raw, parsed: Some(value), backend: self.backend.tag() })
    }

    /// Sends `request`, retrying once with a repair instruction on a parse or
    /// schema failure. The second failure is terminal.
    pub fn complete_json(&self, request: &LlmRequest, schema: &Schema) -> Result<Value, LlmError> {
        debug_assert_eq!(request.template, schema.template());
        let result = match self.attempt(request, schema) {
            Err(e) if e.is_repairable() => {
                self.stats.repairs.fetch_add(1, Ordering::Relaxed);
                log::debug!("{} response rejected ({e}); retrying once", request.template);
                self.attempt(&request.repair(), schema)
            }
            other => other,
        };
        match result {
            Ok(resp) => Ok(resp.parsed.expect("validated responses are parsed")),
            Err(e) => {
                self.stats.failures.fetch_add(1, Ordering::Relaxed);
                Err(e)
            }
        }
    }

    /// Renders and sends in one step.
    pub fn ask(&self, template: TemplateId, bindings: Bindings, schema: &Schema) -> Result<Value, LlmError> {
        let request = LlmRequest::new(template, bindings)?;
        self.complete_json(&request, schema)
    }
}

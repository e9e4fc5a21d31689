//! Blocking JSON-over-HTTP with a timeout, a fixed retry budget, and a shared
//! in-flight limit.

use std::sync::Arc;
use std::time::Duration;

use serde_json::Value;

use crate::util::InFlightLimiter;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HttpError {
    #[error("HTTP status {0}")]
    Status(u16),
    #[error("transport: {0}")]
    Transport(String),
    #[error("response body is not JSON: {0}")]
    Body(String),
}

#[derive(Clone)]
pub struct JsonPoster {
    agent: ureq::Agent,
    limiter: Arc<InFlightLimiter>,
    retries: u32,
}

impl JsonPoster {
    pub fn new(timeout: Duration, retries: u32, limiter: Arc<InFlightLimiter>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent, limiter, retries }
    }

    fn post_once(&self, url: &str, body: &Value, bearer: Option<&str>) -> Result<Value, HttpError> {
        let _slot = self.limiter.acquire();
        let mut req = self.agent.post(url).header("content-type", "application/json");
        if let Some(key) = bearer {
            req = req.header("authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| HttpError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(HttpError::Status(status));
        }
        resp.body_mut().read_json::<Value>().map_err(|e| HttpError::Body(e.to_string()))
    }

    /// Posts `body`, retrying up to the configured budget on any failure.
    pub fn post(&self, url: &str, body: &Value, bearer: Option<&str>) -> Result<Value, HttpError> {
        let mut last = None;
        for _ in 0..=self.retries {
            match self.post_once(url, body, bearer) {
                Ok(v) => return Ok(v),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

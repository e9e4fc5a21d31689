//! Offline backends: scenario lookup tables, programmatic scenarios, and a
//! recorder that captures live traffic into scenario files.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Bindings, LlmBackend, LlmError, LlmRequest, TemplateId};

/// Hex SHA-256 of the bindings serialized as a JSON object with sorted keys.
pub fn bindings_hash(bindings: &Bindings) -> String {
    let canonical = serde_json::to_string(bindings).expect("string map serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// A deterministic responder. `None` means the scenario has nothing to say.
pub trait Scenario: Send + Sync {
    fn respond(&self, request: &LlmRequest) -> Option<String>;
}

/// One line of a scenario file. `bindings_hash = "*"` declares the default for
/// its template. `attempt`, when set, restricts the entry to that attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioEntry {
    pub template_id: TemplateId,
    pub bindings_hash: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u8>,
}

/// Lookup by `(template, bindings hash)` with per-template defaults.
#[derive(Debug, Clone, Default)]
pub struct TableScenario {
    entries: HashMap<(TemplateId, String), Vec<ScenarioEntry>>,
    defaults: HashMap<TemplateId, String>,
}

impl TableScenario {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entry: ScenarioEntry) {
        if entry.bindings_hash == "*" {
            self.defaults.insert(entry.template_id, entry.response);
        } else {
            self.entries.entry((entry.template_id, entry.bindings_hash.clone())).or_default().push(entry);
        }
    }

    pub fn with_default(mut self, template: TemplateId, response: impl Into<String>) -> Self {
        self.defaults.insert(template, response.into());
        self
    }

    pub fn with_response(mut self, template: TemplateId, bindings: &Bindings, response: impl Into<String>) -> Self {
        self.insert(ScenarioEntry {
            template_id: template,
            bindings_hash: bindings_hash(bindings),
            response: response.into(),
            attempt: None,
        });
        self
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, String> {
        let mut scenario = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScenarioEntry = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
            scenario.insert(entry);
        }
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse_jsonl(&text)
    }
}

impl Scenario for TableScenario {
    fn respond(&self, request: &LlmRequest) -> Option<String> {
        let key = (request.template, bindings_hash(&request.bindings));
        if let Some(entries) = self.entries.get(&key) {
            let pick = entries
                .iter()
                .find(|e| e.attempt == Some(request.attempt))
                .or_else(|| entries.iter().find(|e| e.attempt.is_none()));
            if let Some(e) = pick {
                return Some(e.response.clone());
            }
        }
        self.defaults.get(&request.template).cloned()
    }
}

/// Named scenarios available to scripted backends.
#[derive(Clone, Default)]
pub struct ScenarioRegistry {
    scenarios: BTreeMap<String, Arc<dyn Scenario>>,
}

impl ScenarioRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, id: impl Into<String>, scenario: Arc<dyn Scenario>) {
        self.scenarios.insert(id.into(), scenario);
    }

    pub fn contains(&self, id: &str) -> bool {
        self.scenarios.contains_key(id)
    }
}

/// Resolves a request against a registered scenario.
pub fn scripted_lookup(registry: &ScenarioRegistry, scenario_id: &str, request: &LlmRequest) -> Result<String, LlmError> {
    let missing = || LlmError::ScenarioMissing { scenario: scenario_id.to_string(), template: request.template };
    let scenario = registry.scenarios.get(scenario_id).ok_or_else(missing)?;
    scenario.respond(request).ok_or_else(missing)
}

/// Read-only backend over one scenario; safe for unlimited concurrency.
#[derive(Clone)]
pub struct ScriptedBackend {
    registry: Arc<ScenarioRegistry>,
    scenario_id: String,
}

impl ScriptedBackend {
    pub fn new(registry: Arc<ScenarioRegistry>, scenario_id: impl Into<String>) -> Self {
        Self { registry, scenario_id: scenario_id.into() }
    }

    /// Shorthand for a backend over a single scenario.
    pub fn single(scenario_id: &str, scenario: Arc<dyn Scenario>) -> Self {
        let mut registry = ScenarioRegistry::new();
        registry.register(scenario_id, scenario);
        Self::new(Arc::new(registry), scenario_id)
    }
}

impl LlmBackend for ScriptedBackend {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        scripted_lookup(&self.registry, &self.scenario_id, request)
    }

    fn tag(&self) -> String {
        format!("scripted:{}", self.scenario_id)
    }
}

/// Forwards to `inner` and appends every successful exchange as a scenario line.
pub struct RecordingBackend {
    inner: Arc<dyn LlmBackend>,
    out: Mutex<BufWriter<File>>,
}

impl RecordingBackend {
    pub fn create(inner: Arc<dyn LlmBackend>, path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { inner, out: Mutex::new(BufWriter::new(file)) })
    }
}

impl LlmBackend for RecordingBackend {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let response = self.inner.complete(request)?;
        let entry = ScenarioEntry {
            template_id: request.template,
            bindings_hash: bindings_hash(&request.bindings),
            response: response.clone(),
            attempt: (request.attempt > 0).then_some(request.attempt),
        };
        let mut out = self.out.lock();
        let line = serde_json::to_string(&entry).expect("entry serializes");
        writeln!(out, "{line}").and_then(|_| out.flush()).map_err(|e| LlmError::BackendUnavailable(e.to_string()))?;
        Ok(response)
    }

    fn tag(&self) -> String {
        format!("recording:{}", self.inner.tag())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::bindings;

    fn request(rule: &str) -> LlmRequest {
        LlmRequest::new(
            TemplateId::PatternMatch,
            bindings([("rule_name", rule), ("rule_explanation", "\"e\""), ("example_json", "{}")]),
        )
        .unwrap()
    }

    #[test]
    fn lookup_is_deterministic_with_defaults() {
        let hit = request("\"A\"");
        let scenario = TableScenario::new()
            .with_response(TemplateId::PatternMatch, &hit.bindings, "yes")
            .with_default(TemplateId::PatternMatch, "default");
        let backend = ScriptedBackend::single("s", Arc::new(scenario));
        assert_eq!(backend.complete(&hit).unwrap(), "yes");
        assert_eq!(backend.complete(&hit).unwrap(), "yes");
        assert_eq!(backend.complete(&request("\"B\"")).unwrap(), "default");
    }

    #[test]
    fn missing_template_without_default() {
        let backend = ScriptedBackend::single("s", Arc::new(TableScenario::new()));
        assert!(matches!(backend.complete(&request("\"A\"")), Err(LlmError::ScenarioMissing { .. })));
        let registry = ScenarioRegistry::new();
        assert!(matches!(scripted_lookup(&registry, "nope", &request("\"A\"")), Err(LlmError::ScenarioMissing { .. })));
    }

    #[test]
    fn attempt_specific_entries() {
        let req = request("\"A\"");
        let mut scenario = TableScenario::new();
        let hash = bindings_hash(&req.bindings);
        scenario.insert(ScenarioEntry { template_id: req.template, bindings_hash: hash.clone(), response: "bad".into(), attempt: Some(0) });
        scenario.insert(ScenarioEntry { template_id: req.template, bindings_hash: hash, response: "good".into(), attempt: Some(1) });
        assert_eq!(scenario.respond(&req).as_deref(), Some("bad"));
        let mut retry = req.clone();
        retry.attempt = 1;
        assert_eq!(scenario.respond(&retry).as_deref(), Some("good"));
    }

    #[test]
    fn recording_round_trips_through_scenario_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.jsonl");
        let req = request("\"A\"");
        let inner = ScriptedBackend::single(
            "s",
            Arc::new(TableScenario::new().with_default(TemplateId::PatternMatch, "{\"x\":1}")),
        );
        let recorder = RecordingBackend::create(Arc::new(inner), &path).unwrap();
        recorder.complete(&req).unwrap();
        drop(recorder);
        let replay = TableScenario::load(&path).unwrap();
        assert_eq!(replay.respond(&req).as_deref(), Some("{\"x\":1}"));
        assert_eq!(replay.respond(&request("\"other\"")), None);
    }
}

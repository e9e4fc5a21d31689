//! Uniform prediction-provider abstraction over heterogeneous tools.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::domain::{Dataset, Idx, Prediction, PredictionMap, Reaction, ToolId};
use crate::http::{JsonPoster, DEFAULT_TIMEOUT};
use crate::llm::{bindings, LlmClient, Schema, TemplateId};
use crate::util::InFlightLimiter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Level {
    L1,
    L2,
    #[default]
    Unassigned,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::L1 => "T1",
            Level::L2 => "T2",
            Level::Unassigned => "-",
        })
    }
}

/// Where a tool's predictions come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderBinding {
    /// CSV or JSONL table with `idx,prediction` rows.
    Table { path: PathBuf },
    /// Inline columns of the dataset file itself.
    Inline,
    /// POST `{reactants, product}` → `{prediction}`.
    Http { endpoint: String },
    /// Zero-shot LLM prompting with the given template.
    LlmPrompting { template_id: TemplateId },
    /// Built-in deterministic behaviour, see [`ScriptedTool`].
    Scripted { scenario_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRecord {
    pub tool_id: ToolId,
    pub display_name: String,
    #[serde(default)]
    pub level: Level,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    pub provider: ProviderBinding,
}

impl ToolRecord {
    pub fn new(tool_id: impl Into<ToolId>, provider: ProviderBinding) -> Self {
        let tool_id = tool_id.into();
        Self { display_name: tool_id.clone(), tool_id, level: Level::Unassigned, val_accuracy: None, provider }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    #[error("provider failed: {0}")]
    Failed(String),
    #[error("provider answered outside 0/1/NA: {0}")]
    OutOfDomain(String),
    #[error("provider not configured: {0}")]
    Unconfigured(String),
}

pub trait PredictionProvider: Send + Sync {
    fn predict(&self, r: &Reaction) -> Result<Prediction, ProviderError>;
}

/// Read-only idx → prediction map; absent rows are NA.
#[derive(Debug, Clone, Default)]
pub struct TableProvider {
    rows: Arc<BTreeMap<Idx, Prediction>>,
}

impl TableProvider {
    pub fn new(rows: BTreeMap<Idx, Prediction>) -> Self {
        Self { rows: Arc::new(rows) }
    }

    pub fn rows(&self) -> &BTreeMap<Idx, Prediction> {
        &self.rows
    }
}

impl PredictionProvider for TableProvider {
    fn predict(&self, r: &Reaction) -> Result<Prediction, ProviderError> {
        Ok(self.rows.get(&r.idx).copied().unwrap_or(Prediction::NA))
    }
}

pub struct HttpProvider {
    endpoint: String,
    poster: JsonPoster,
}

impl HttpProvider {
    /// One retry after the first failure, then NA.
    pub fn new(endpoint: impl Into<String>, timeout: Duration, limiter: Arc<InFlightLimiter>) -> Self {
        Self { endpoint: endpoint.into(), poster: JsonPoster::new(timeout, 1, limiter) }
    }
}

impl PredictionProvider for HttpProvider {
    fn predict(&self, r: &Reaction) -> Result<Prediction, ProviderError> {
        let body = json!({"reactants": r.reactants, "product": r.product});
        let reply = self.poster.post(&self.endpoint, &body, None).map_err(|e| ProviderError::Failed(e.to_string()))?;
        let value = reply.get("prediction").cloned().unwrap_or(Value::Null);
        if reply.get("prediction").is_none() {
            return Err(ProviderError::OutOfDomain(reply.to_string()));
        }
        Prediction::from_json(&value).ok_or_else(|| ProviderError::OutOfDomain(value.to_string()))
    }
}

/// Asks an LLM directly with the zero-shot feasibility prompt.
pub struct LlmPromptingProvider {
    client: LlmClient,
}

impl LlmPromptingProvider {
    pub fn new(client: LlmClient) -> Self {
        Self { client }
    }
}

/// Zero-shot feasibility question through the DirectAsk template.
pub fn direct_ask(client: &LlmClient, r: &Reaction) -> Result<Prediction, crate::llm::LlmError> {
    let b = bindings([("reactants", r.reactants.as_str()), ("product", r.product.as_str())]);
    let v = client.ask(TemplateId::DirectAsk, b, &Schema::DirectAsk)?;
    Ok(match crate::llm::schema_binary(&v["prediction"]) {
        Some(1) => Prediction::Pred1,
        _ => Prediction::Pred0,
    })
}

impl PredictionProvider for LlmPromptingProvider {
    fn predict(&self, r: &Reaction) -> Result<Prediction, ProviderError> {
        direct_ask(&self.client, r).map_err(|e| ProviderError::Failed(e.to_string()))
    }
}

/// Built-in scripted tools for tests and demos.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptedTool {
    AlwaysFeasible,
    AlwaysInfeasible,
    AlwaysNa,
    /// Pred1 on even idx, Pred0 on odd.
    Parity,
}

impl ScriptedTool {
    pub fn from_id(id: &str) -> Option<Self> {
        match id {
            "always-feasible" => Some(Self::AlwaysFeasible),
            "always-infeasible" => Some(Self::AlwaysInfeasible),
            "always-na" => Some(Self::AlwaysNa),
            "parity" => Some(Self::Parity),
            _ => None,
        }
    }
}

impl PredictionProvider for ScriptedTool {
    fn predict(&self, r: &Reaction) -> Result<Prediction, ProviderError> {
        Ok(match self {
            ScriptedTool::AlwaysFeasible => Prediction::Pred1,
            ScriptedTool::AlwaysInfeasible => Prediction::Pred0,
            ScriptedTool::AlwaysNa => Prediction::NA,
            ScriptedTool::Parity => {
                if r.idx % 2 == 0 {
                    Prediction::Pred1
                } else {
                    Prediction::Pred0
                }
            }
        })
    }
}

/// A provider failure converted to NA.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub tool_id: ToolId,
    pub idx: Idx,
    pub message: String,
}

#[derive(Clone)]
pub struct Tool {
    pub record: ToolRecord,
    provider: Arc<dyn PredictionProvider>,
}

impl Tool {
    pub fn new(record: ToolRecord, provider: Arc<dyn PredictionProvider>) -> Self {
        Self { record, provider }
    }

    pub fn id(&self) -> &str {
        &self.record.tool_id
    }

    /// Never fails: any provider error becomes NA plus a diagnostic.
    pub fn predict(&self, r: &Reaction) -> (Prediction, Option<Diagnostic>) {
        match self.provider.predict(r) {
            Ok(p) => (p, None),
            Err(e) => {
                log::warn!("tool {} failed on idx {}: {e}", self.record.tool_id, r.idx);
                (Prediction::NA, Some(Diagnostic { tool_id: self.record.tool_id.clone(), idx: r.idx, message: e.to_string() }))
            }
        }
    }
}

impl fmt::Debug for Tool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tool").field("record", &self.record).finish_non_exhaustive()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("duplicate tool id {0}")]
    DuplicateTool(ToolId),
    #[error("unknown tool {0}")]
    UnknownTool(ToolId),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Ordered, immutable-after-setup set of tools.
#[derive(Debug, Clone, Default)]
pub struct ToolRegistry {
    tools: Vec<Tool>,
}

/// Settings needed to materialize non-table providers.
#[derive(Clone, Default)]
pub struct ProviderContext {
    pub llm: Option<LlmClient>,
    pub http_timeout: Option<Duration>,
    pub http_limiter: Option<Arc<InFlightLimiter>>,
    /// Columns used by [`ProviderBinding::Inline`].
    pub inline: PredictionMap,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, tool: Tool) -> Result<(), RegistryError> {
        if self.get(tool.id()).is_some() {
            return Err(RegistryError::DuplicateTool(tool.id().to_string()));
        }
        self.tools.push(tool);
        Ok(())
    }

    /// One table-backed tool per prediction column.
    pub fn from_columns(columns: &PredictionMap) -> Self {
        let mut reg = Self::new();
        for (tool, rows) in columns {
            let record = ToolRecord::new(tool.clone(), ProviderBinding::Inline);
            reg.tools.push(Tool::new(record, Arc::new(TableProvider::new(rows.clone()))));
        }
        reg
    }

    /// Builds providers for serialized records.
    pub fn from_records(records: Vec<ToolRecord>, ctx: &ProviderContext) -> Result<Self, RegistryError> {
        let mut reg = Self::new();
        for record in records {
            let provider: Arc<dyn PredictionProvider> = match &record.provider {
                ProviderBinding::Table { path } => Arc::new(TableProvider::new(load_prediction_table(path)?)),
                ProviderBinding::Inline => {
                    Arc::new(TableProvider::new(ctx.inline.get(&record.tool_id).cloned().unwrap_or_default()))
                }
                ProviderBinding::Http { endpoint } => Arc::new(HttpProvider::new(
                    endpoint.clone(),
                    ctx.http_timeout.unwrap_or(DEFAULT_TIMEOUT),
                    ctx.http_limiter.clone().unwrap_or_else(|| Arc::new(InFlightLimiter::new(8))),
                )),
                ProviderBinding::LlmPrompting { .. } => {
                    let client = ctx.llm.clone().ok_or_else(|| {
                        ProviderError::Unconfigured(format!("{} needs an LLM backend", record.tool_id))
                    })?;
                    Arc::new(LlmPromptingProvider::new(client))
                }
                ProviderBinding::Scripted { scenario_id } => Arc::new(
                    ScriptedTool::from_id(scenario_id)
                        .ok_or_else(|| ProviderError::Unconfigured(format!("unknown scripted tool {scenario_id}")))?,
                ),
            };
            reg.add(Tool::new(record, provider))?;
        }
        Ok(reg)
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn tools(&self) -> &[Tool] {
        &self.tools
    }

    pub fn records(&self) -> Vec<ToolRecord> {
        self.tools.iter().map(|t| t.record.clone()).collect()
    }

    pub fn ids(&self) -> Vec<ToolId> {
        self.tools.iter().map(|t| t.record.tool_id.clone()).collect()
    }

    pub fn get(&self, tool_id: &str) -> Option<&Tool> {
        self.tools.iter().find(|t| t.record.tool_id == tool_id)
    }

    pub fn get_mut(&mut self, tool_id: &str) -> Option<&mut Tool> {
        self.tools.iter_mut().find(|t| t.record.tool_id == tool_id)
    }

    pub fn val_accuracy(&self, tool_id: &str) -> f64 {
        self.get(tool_id).and_then(|t| t.record.val_accuracy).unwrap_or(0.0)
    }

    pub fn predict(&self, tool_id: &str, r: &Reaction) -> (Prediction, Option<Diagnostic>) {
        match self.get(tool_id) {
            Some(tool) => tool.predict(r),
            None => (
                Prediction::NA,
                Some(Diagnostic { tool_id: tool_id.to_string(), idx: r.idx, message: "unknown tool".into() }),
            ),
        }
    }

    /// Queries every tool on every reaction and returns the columns.
    pub fn prediction_columns(&self, dataset: &Dataset) -> (PredictionMap, Vec<Diagnostic>) {
        use rayon::prelude::*;
        let mut diagnostics = Vec::new();
        let mut columns = PredictionMap::new();
        for tool in &self.tools {
            let results: Vec<_> = dataset.reactions.par_iter().map(|r| (r.idx, tool.predict(r))).collect();
            let mut col = BTreeMap::new();
            for (idx, (p, d)) in results {
                col.insert(idx, p);
                diagnostics.extend(d);
            }
            columns.insert(tool.record.tool_id.clone(), col);
        }
        (columns, diagnostics)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TableError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed row on line {0}: {1}")]
    MalformedRow(usize, String),
    #[error("prediction value out of domain: {0}")]
    ValueOutOfDomain(String),
}

/// Reads `idx,prediction` rows from CSV (header required) or JSONL.
pub fn load_prediction_table(path: &Path) -> Result<BTreeMap<Idx, Prediction>, TableError> {
    let text = std::fs::read_to_string(path).map_err(|source| TableError::Io { path: path.display().to_string(), source })?;
    let is_jsonl = path.extension().is_some_and(|e| e == "jsonl" || e == "json");
    if is_jsonl {
        parse_jsonl_table(&text)
    } else {
        parse_csv_table(&text)
    }
}

pub fn parse_csv_table(text: &str) -> Result<BTreeMap<Idx, Prediction>, TableError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| TableError::MalformedRow(1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(idx_col), Some(pred_col)) = (col("idx"), col("prediction")) else {
        return Err(TableError::MalformedRow(1, "header must contain idx,prediction".into()));
    };
    let mut rows = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| TableError::MalformedRow(line, e.to_string()))?;
        let idx: Idx = record
            .get(idx_col)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TableError::MalformedRow(line, "idx is not a non-negative integer".into()))?;
        let raw = record.get(pred_col).unwrap_or("");
        let p = Prediction::parse(raw).ok_or_else(|| TableError::ValueOutOfDomain(raw.to_string()))?;
        rows.insert(idx, p);
    }
    Ok(rows)
}

fn parse_jsonl_table(text: &str) -> Result<BTreeMap<Idx, Prediction>, TableError> {
    let mut rows = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| TableError::MalformedRow(i + 1, e.to_string()))?;
        let idx = v["idx"].as_u64().ok_or_else(|| TableError::MalformedRow(i + 1, "missing idx".into()))?;
        let p = Prediction::from_json(&v["prediction"]).ok_or_else(|| TableError::ValueOutOfDomain(v["prediction"].to_string()))?;
        rows.insert(idx, p);
    }
    Ok(rows)
}

pub fn write_prediction_table(rows: &BTreeMap<Idx, Prediction>) -> String {
    let mut out = String::from("idx,prediction\n");
    for (idx, p) in rows {
        out.push_str(&format!("{idx},{p}\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AccuracyError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("reaction {0} has no label")]
    MissingLabel(Idx),
}

/// Fraction of reactions where the tool's prediction equals the label; NA is wrong.
pub fn tool_accuracy(tool_id: &str, dataset: &Dataset) -> Result<f64, AccuracyError> {
    if dataset.is_empty() {
        return Err(AccuracyError::EmptyDataset);
    }
    let mut correct = 0usize;
    for r in &dataset.reactions {
        let label = r.label.ok_or(AccuracyError::MissingLabel(r.idx))?;
        if dataset.prediction(tool_id, r.idx).is_correct(label) {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Label, Split};
    use crate::http::testing::serve;
    use proptest::prelude::*;

    fn labeled(labels: &[u8]) -> Dataset {
        let reactions = labels
            .iter()
            .enumerate()
            .map(|(i, l)| Reaction::new(i as Idx, "C", "O", Label::from_int(*l as i64)))
            .collect();
        Dataset::new(Split::Validation, reactions).unwrap()
    }

    #[test]
    fn csv_rows() {
        let rows = parse_csv_table("idx,prediction\n7,1\n9,NA\n3,0\n").unwrap();
        assert_eq!(rows[&7], Prediction::Pred1);
        assert_eq!(rows[&9], Prediction::NA);
        let provider = TableProvider::new(rows);
        assert_eq!(provider.predict(&Reaction::new(3, "C", "O", None)).unwrap(), Prediction::Pred0);
        assert_eq!(provider.predict(&Reaction::new(42, "C", "O", None)).unwrap(), Prediction::NA);
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(parse_csv_table("idx,prediction\nx,1\n"), Err(TableError::MalformedRow(2, _))));
        assert!(matches!(parse_csv_table("idx,prediction\n1,2\n"), Err(TableError::ValueOutOfDomain(v)) if v == "2"));
        assert!(matches!(parse_csv_table("a,b\n1,1\n"), Err(TableError::MalformedRow(1, _))));
    }

    #[test]
    fn jsonl_table() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        std::fs::write(&p, "{\"idx\":1,\"prediction\":\"NA\"}\n{\"idx\":2,\"prediction\":1}\n").unwrap();
        let rows = load_prediction_table(&p).unwrap();
        assert_eq!(rows[&1], Prediction::NA);
        assert_eq!(rows[&2], Prediction::Pred1);
    }

    #[test]
    fn scripted_always_feasible() {
        let tool = Tool::new(
            ToolRecord::new("s", ProviderBinding::Scripted { scenario_id: "always-feasible".into() }),
            Arc::new(ScriptedTool::AlwaysFeasible),
        );
        for idx in 0..5 {
            assert_eq!(tool.predict(&Reaction::new(idx, "C", "O", None)).0, Prediction::Pred1);
        }
    }

    #[test]
    fn http_503_becomes_na_with_diagnostic() {
        let (url, _) = serve(503, "{}");
        let provider = HttpProvider::new(url, Duration::from_secs(5), Arc::new(InFlightLimiter::new(2)));
        let tool = Tool::new(ToolRecord::new("h", ProviderBinding::Http { endpoint: "x".into() }), Arc::new(provider));
        let (p, diag) = tool.predict(&Reaction::new(1, "C", "O", None));
        assert_eq!(p, Prediction::NA);
        assert!(diag.unwrap().message.contains("503"));
    }

    #[test]
    fn http_success_and_bad_domain() {
        let (url, _) = serve(200, r#"{"prediction":1}"#);
        let provider = HttpProvider::new(url, Duration::from_secs(5), Arc::new(InFlightLimiter::new(2)));
        assert_eq!(provider.predict(&Reaction::new(1, "C", "O", None)).unwrap(), Prediction::Pred1);
        let (url, _) = serve(200, r#"{"prediction":7}"#);
        let provider = HttpProvider::new(url, Duration::from_secs(5), Arc::new(InFlightLimiter::new(2)));
        assert!(matches!(provider.predict(&Reaction::new(1, "C", "O", None)), Err(ProviderError::OutOfDomain(_))));
    }

    #[test]
    fn accuracy_examples() {
        let mut ds = labeled(&[1; 10]);
        ds.set_column("all_right", (0..10).map(|i| (i, Prediction::Pred1)).collect());
        ds.set_column("all_na", (0..10).map(|i| (i, Prediction::NA)).collect());
        assert_eq!(tool_accuracy("all_right", &ds).unwrap(), 1.0);
        assert_eq!(tool_accuracy("all_na", &ds).unwrap(), 0.0);
        assert_eq!(tool_accuracy("absent", &ds).unwrap(), 0.0);

        let mut ds = labeled(&[1, 1, 0, 0, 1]);
        ds.set_column("t", [(0, Prediction::Pred1), (1, Prediction::Pred1), (2, Prediction::Pred0), (3, Prediction::Pred0), (4, Prediction::Pred0)].into());
        assert_eq!(tool_accuracy("t", &ds).unwrap(), 0.8);

        let empty = Dataset::new(Split::Test, vec![]).unwrap();
        assert_eq!(tool_accuracy("t", &empty), Err(AccuracyError::EmptyDataset));
    }

    proptest! {
        #[test]
        fn complement_tool_accuracy(labels in proptest::collection::vec(0u8..2, 1..40), preds in proptest::collection::vec(0u8..2, 40)) {
            let mut ds = labeled(&labels);
            let col: BTreeMap<Idx, Prediction> = (0..labels.len()).map(|i| (i as Idx, if preds[i] == 1 { Prediction::Pred1 } else { Prediction::Pred0 })).collect();
            let flipped = col.iter().map(|(i, p)| (*i, Prediction::from_label(p.label().unwrap().flip()))).collect();
            ds.set_column("t", col);
            ds.set_column("flip", flipped);
            let a = tool_accuracy("t", &ds).unwrap();
            let b = tool_accuracy("flip", &ds).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((a - (1.0 - b)).abs() < 1e-12);
        }
    }
}

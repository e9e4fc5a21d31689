use serde_json::Value;

use super::TemplateId;

/// Structural contract for each template's JSON reply.
///
/// Checks keys and value domains only. Domains declared by the prompt itself
/// (allowed tool ids, the trusted tool, the elimination pool) are enforced;
/// chemistry is never judged. Keys whose values the pipeline does not read
/// (`reason` fields, echo fields) are type-checked when present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Schema {
    PatternExtraction,
    PatternMatch,
    Consolidation,
    MemoryBuild { gold_tool: String, neg_tools: Vec<String> },
    ToolSelect { allowed: Vec<String> },
    DirectAsk,
}

pub const ABSTAIN: &str = "abstain";

type Check = Result<(), String>;

fn obj(v: &Value) -> Result<&serde_json::Map<String, Value>, String> {
    v.as_object().ok_or_else(|| "$".to_string())
}

fn string<'a>(o: &'a serde_json::Map<String, Value>, key: &str) -> Result<&'a str, String> {
    o.get(key).and_then(Value::as_str).ok_or_else(|| key.to_string())
}

fn optional_string(o: &serde_json::Map<String, Value>, key: &str) -> Check {
    match o.get(key) {
        None | Some(Value::String(_)) => Ok(()),
        Some(_) => Err(key.to_string()),
    }
}

/// 0/1 given as a number or a numeric string.
pub(crate) fn binary(v: &Value) -> Option<u8> {
    match v {
        Value::Number(n) => match n.as_f64() {
            Some(x) if x == 0.0 => Some(0),
            Some(x) if x == 1.0 => Some(1),
            _ => None,
        },
        Value::String(s) => match s.trim() {
            "0" => Some(0),
            "1" => Some(1),
            _ => None,
        },
        _ => None,
    }
}

impl Schema {
    pub fn template(&self) -> TemplateId {
        match self {
            Schema::PatternExtraction => TemplateId::PatternExtraction,
            Schema::PatternMatch => TemplateId::PatternMatch,
            Schema::Consolidation => TemplateId::Consolidation,
            Schema::MemoryBuild { .. } => TemplateId::MemoryBuild,
            Schema::ToolSelect { .. } => TemplateId::ToolSelect,
            Schema::DirectAsk => TemplateId::DirectAsk,
        }
    }

    /// Returns the offending key path on failure.
    pub fn validate(&self, v: &Value) -> Check {
        let o = obj(v)?;
        match self {
            Schema::PatternExtraction => {
                match o.get("tool_acc") {
                    None | Some(Value::String(_)) | Some(Value::Number(_)) => {}
                    Some(_) => return Err("tool_acc".into()),
                }
                let entries = o.get("often_correct_on").and_then(Value::as_array).ok_or("often_correct_on")?;
                for (i, e) in entries.iter().enumerate() {
                    let path = |k: &str| format!("often_correct_on[{i}].{k}");
                    let e = e.as_object().ok_or_else(|| format!("often_correct_on[{i}]"))?;
                    string(e, "name").map_err(|k| path(&k))?;
                    string(e, "explanation").map_err(|k| path(&k))?;
                    let ids = e.get("examples_idx").and_then(Value::as_array).ok_or_else(|| path("examples_idx"))?;
                    if !ids.iter().all(|x| x.as_u64().is_some()) {
                        return Err(path("examples_idx"));
                    }
                }
                Ok(())
            }
            Schema::PatternMatch => {
                o.get("belongs_to_rule").and_then(Value::as_bool).ok_or("belongs_to_rule")?;
                match string(o, "confidence")? {
                    "high" | "medium" | "low" => {}
                    _ => return Err("confidence".into()),
                }
                optional_string(o, "name")?;
                optional_string(o, "reason")?;
                match o.get("idx") {
                    None | Some(Value::Number(_)) | Some(Value::String(_)) => Ok(()),
                    Some(_) => Err("idx".into()),
                }
            }
            Schema::Consolidation => {
                o.get("keep_index").and_then(Value::as_i64).ok_or("keep_index")?;
                optional_string(o, "reason")
            }
            Schema::MemoryBuild { gold_tool, neg_tools } => {
                if string(o, "tool")? != gold_tool {
                    return Err("tool".into());
                }
                let evidence = o.get("evidence").and_then(Value::as_array).ok_or("evidence")?;
                if evidence.is_empty() || !evidence.iter().all(Value::is_string) {
                    return Err("evidence".into());
                }
                let elimination = o.get("elimination").and_then(Value::as_array).ok_or("elimination")?;
                if elimination.len() > 3 {
                    return Err("elimination".into());
                }
                for (i, e) in elimination.iter().enumerate() {
                    let e = e.as_object().ok_or_else(|| format!("elimination[{i}]"))?;
                    let tool = string(e, "tool").map_err(|_| format!("elimination[{i}].tool"))?;
                    if !neg_tools.iter().any(|t| t == tool) {
                        return Err(format!("elimination[{i}].tool"));
                    }
                    string(e, "why_not").map_err(|_| format!("elimination[{i}].why_not"))?;
                }
                string(o, "final_reason")?;
                Ok(())
            }
            Schema::ToolSelect { allowed } => {
                let tool = string(o, "tool")?;
                if tool != ABSTAIN && !allowed.iter().any(|t| t == tool) {
                    return Err("tool".into());
                }
                optional_string(o, "reason")
            }
            Schema::DirectAsk => {
                o.get("prediction").and_then(binary).ok_or("prediction")?;
                optional_string(o, "reason")
            }
        }
    }
}

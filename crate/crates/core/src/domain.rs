//! Core value types and JSONL dataset ingestion.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::chem::{self, TokenizeError};

/// Reaction identifier, unique within a dataset.
pub type Idx = u64;

/// Short stable tool identifier.
pub type ToolId = String;

/// Gold feasibility label. Serialized as the integers 1/0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Infeasible,
    Feasible,
}

impl Label {
    pub fn as_int(self) -> u8 {
        match self {
            Label::Feasible => 1,
            Label::Infeasible => 0,
        }
    }

    pub fn from_int(v: i64) -> Option<Label> {
        match v {
            1 => Some(Label::Feasible),
            0 => Some(Label::Infeasible),
            _ => None,
        }
    }

    pub fn flip(self) -> Label {
        match self {
            Label::Feasible => Label::Infeasible,
            Label::Infeasible => Label::Feasible,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_int())
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_int())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        Label::from_int(v).ok_or_else(|| serde::de::Error::custom(format!("label must be 0 or 1, got {v}")))
    }
}

/// A tool's output on one reaction. `NA` never equals a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Prediction {
    Pred0,
    Pred1,
    #[default]
    NA,
}

impl Prediction {
    pub fn from_label(label: Label) -> Prediction {
        match label {
            Label::Feasible => Prediction::Pred1,
            Label::Infeasible => Prediction::Pred0,
        }
    }

    pub fn label(self) -> Option<Label> {
        match self {
            Prediction::Pred1 => Some(Label::Feasible),
            Prediction::Pred0 => Some(Label::Infeasible),
            Prediction::NA => None,
        }
    }

    /// True only for a non-NA prediction equal to `label`.
    pub fn is_correct(self, label: Label) -> bool {
        self.label() == Some(label)
    }

    pub fn is_na(self) -> bool {
        self == Prediction::NA
    }

    /// Parses the textual forms used by tables and JSON: 0, 1, NA, None, null, empty.
    pub fn parse(text: &str) -> Option<Prediction> {
        match text.trim() {
            "1" | "1.0" => Some(Prediction::Pred1),
            "0" | "0.0" => Some(Prediction::Pred0),
            "NA" | "na" | "N/A" | "None" | "none" | "null" | "" => Some(Prediction::NA),
            _ => None,
        }
    }

    pub fn from_json(v: &Value) -> Option<Prediction> {
        match v {
            Value::Null => Some(Prediction::NA),
            Value::Number(n) => match n.as_f64() {
                Some(x) if x == 1.0 => Some(Prediction::Pred1),
                Some(x) if x == 0.0 => Some(Prediction::Pred0),
                _ => None,
            },
            Value::String(s) => Prediction::parse(s),
            _ => None,
        }
    }

    pub fn to_json(self) -> Value {
        match self {
            Prediction::Pred1 => Value::from(1),
            Prediction::Pred0 => Value::from(0),
            Prediction::NA => Value::from("NA"),
        }
    }
}

impl fmt::Display for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prediction::Pred1 => f.write_str("1"),
            Prediction::Pred0 => f.write_str("0"),
            Prediction::NA => f.write_str("NA"),
        }
    }
}

impl Serialize for Prediction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Prediction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        Prediction::from_json(&v).ok_or_else(|| serde::de::Error::custom(format!("prediction must be 0, 1 or NA, got {v}")))
    }
}

/// One reactants → product pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reaction {
    pub idx: Idx,
    pub reactants: String,
    pub product: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

impl Reaction {
    pub fn new(idx: Idx, reactants: impl Into<String>, product: impl Into<String>, label: Option<Label>) -> Self {
        Self { idx, reactants: reactants.into(), product: product.into(), label }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Validation,
    Test,
    Synthetic,
}

/// Per-tool prediction columns: tool → idx → prediction.
pub type PredictionMap = BTreeMap<ToolId, BTreeMap<Idx, Prediction>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub reactions: Vec<Reaction>,
    pub predictions: PredictionMap,
    positions: BTreeMap<Idx, usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed JSON on line {0}: {1}")]
    MalformedLine(usize, String),
    #[error("duplicate idx {0}")]
    DuplicateIdx(Idx),
    #[error("missing field `{0}` on line {1}")]
    MissingField(&'static str, usize),
    #[error("invalid value for `{field}` on line {line}: {value}")]
    InvalidValue { field: String, line: usize, value: String },
    #[error("prediction for tool {tool} references unknown idx {idx}")]
    UnknownIdx { tool: ToolId, idx: Idx },
}

const RESERVED_KEYS: [&str; 4] = ["idx", "reactants", "product", "label"];

/// Keys that never name a tool column even though they carry scalar values.
const IGNORED_KEYS: [&str; 3] = ["split", "region", "family"];

impl Dataset {
    pub fn new(split: Split, reactions: Vec<Reaction>) -> Result<Self, DatasetError> {
        let mut positions = BTreeMap::new();
        for (pos, r) in reactions.iter().enumerate() {
            if positions.insert(r.idx, pos).is_some() {
                return Err(DatasetError::DuplicateIdx(r.idx));
            }
        }
        Ok(Self { split, reactions, predictions: BTreeMap::new(), positions })
    }

    pub fn with_predictions(mut self, predictions: PredictionMap) -> Result<Self, DatasetError> {
        for (tool, column) in &predictions {
            if let Some(idx) = column.keys().find(|i| !self.positions.contains_key(i)) {
                return Err(DatasetError::UnknownIdx { tool: tool.clone(), idx: *idx });
            }
        }
        self.predictions = predictions;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.reactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reactions.is_empty()
    }

    pub fn get(&self, idx: Idx) -> Option<&Reaction> {
        self.positions.get(&idx).map(|&p| &self.reactions[p])
    }

    pub fn contains(&self, idx: Idx) -> bool {
        self.positions.contains_key(&idx)
    }

    pub fn label(&self, idx: Idx) -> Option<Label> {
        self.get(idx).and_then(|r| r.label)
    }

    pub fn is_labeled(&self) -> bool {
        !self.reactions.is_empty() && self.reactions.iter().all(|r| r.label.is_some())
    }

    /// Missing tools or rows resolve to NA.
    pub fn prediction(&self, tool: &str, idx: Idx) -> Prediction {
        self.predictions
            .get(tool)
            .and_then(|col| col.get(&idx))
            .copied()
            .unwrap_or(Prediction::NA)
    }

    pub fn tool_ids(&self) -> impl Iterator<Item = &ToolId> {
        self.predictions.keys()
    }

    /// Inserts or replaces one tool column, dropping rows for unknown idx.
    pub fn set_column(&mut self, tool: impl Into<ToolId>, column: BTreeMap<Idx, Prediction>) {
        let column = column.into_iter().filter(|(i, _)| self.positions.contains_key(i)).collect();
        self.predictions.insert(tool.into(), column);
    }

    /// Serializes to JSONL with inline per-tool columns.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.reactions {
            let mut obj = Map::new();
            obj.insert("idx".into(), Value::from(r.idx));
            obj.insert("reactants".into(), Value::from(r.reactants.clone()));
            obj.insert("product".into(), Value::from(r.product.clone()));
            if let Some(l) = r.label {
                obj.insert("label".into(), Value::from(l.as_int()));
            }
            for (tool, col) in &self.predictions {
                if let Some(p) = col.get(&r.idx) {
                    obj.insert(tool.clone(), p.to_json());
                }
            }
            out.push_str(&Value::Object(obj).to_string());
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(split: Split, text: &str) -> Result<Self, DatasetError> {
        let mut reactions = Vec::new();
        let mut predictions: PredictionMap = BTreeMap::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let value: Value = serde_json::from_str(line).map_err(|e| DatasetError::MalformedLine(line_no, e.to_string()))?;
            let obj = value
                .as_object()
                .ok_or_else(|| DatasetError::MalformedLine(line_no, "expected a JSON object".into()))?;
            let idx = match obj.get("idx") {
                None => return Err(DatasetError::MissingField("idx", line_no)),
                Some(v) => v.as_u64().ok_or_else(|| DatasetError::InvalidValue {
                    field: "idx".into(),
                    line: line_no,
                    value: v.to_string(),
                })?,
            };
            let text_field = |name: &'static str| -> Result<String, DatasetError> {
                match obj.get(name) {
                    None => Err(DatasetError::MissingField(name, line_no)),
                    Some(Value::String(s)) => Ok(s.clone()),
                    Some(v) => Err(DatasetError::InvalidValue { field: name.into(), line: line_no, value: v.to_string() }),
                }
            };
            let reactants = text_field("reactants")?;
            let product = text_field("product")?;
            let label = match obj.get("label") {
                None | Some(Value::Null) => None,
                Some(v) => Some(v.as_i64().and_then(Label::from_int).ok_or_else(|| DatasetError::InvalidValue {
                    field: "label".into(),
                    line: line_no,
                    value: v.to_string(),
                })?),
            };
            if !seen.insert(idx) {
                return Err(DatasetError::DuplicateIdx(idx));
            }
            for (key, v) in obj {
                if RESERVED_KEYS.contains(&key.as_str()) || IGNORED_KEYS.contains(&key.as_str()) {
                    continue;
                }
                // Keys whose values are not 0/1/NA are unknown and ignored.
                if let Some(p) = Prediction::from_json(v) {
                    predictions.entry(key.clone()).or_default().insert(idx, p);
                }
            }
            reactions.push(Reaction { idx, reactants, product, label });
        }
        Dataset::new(split, reactions)?.with_predictions(predictions)
    }
}

/// Loads a JSONL dataset; per-tool keys are folded into the predictions map.
pub fn load_dataset(path: &Path, split: Split) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
    Dataset::parse_jsonl(split, &text)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyReactants,
    EmptyProduct,
    UnbalancedParenthesis { side: Side },
    UnterminatedBracket { side: Side },
    UnknownCharacter { side: Side, pos: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Reactants,
    Product,
}

pub type ValidationResult = Result<(), Vec<Violation>>;

pub fn validate_reaction(r: &Reaction) -> ValidationResult {
    let mut violations = Vec::new();
    for (side, text) in [(Side::Reactants, &r.reactants), (Side::Product, &r.product)] {
        if text.trim().is_empty() {
            violations.push(match side {
                Side::Reactants => Violation::EmptyReactants,
                Side::Product => Violation::EmptyProduct,
            });
            continue;
        }
        if let Err(e) = chem::tokenize_smiles(text) {
            violations.push(match e {
                TokenizeError::UnbalancedParenthesis => Violation::UnbalancedParenthesis { side },
                TokenizeError::UnterminatedBracket => Violation::UnterminatedBracket { side },
                TokenizeError::UnknownCharacter(pos) => Violation::UnknownCharacter { side, pos },
                TokenizeError::Empty => match side {
                    Side::Reactants => Violation::EmptyReactants,
                    Side::Product => Violation::EmptyProduct,
                },
            });
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

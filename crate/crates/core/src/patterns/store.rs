use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Pattern, PatternStatus};
use crate::domain::ToolId;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed pattern store: {0}")]
    Malformed(String),
    #[error("invalid pattern: {0}")]
    Invalid(String),
}

/// `tool_id → patterns`, the on-disk form of every pattern stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatternStore {
    pub tools: BTreeMap<ToolId, Vec<Pattern>>,
}

impl PatternStore {
    pub fn from_patterns(patterns: impl IntoIterator<Item = Pattern>) -> Self {
        let mut tools: BTreeMap<ToolId, Vec<Pattern>> = BTreeMap::new();
        for p in patterns {
            tools.entry(p.tool_id.clone()).or_default().push(p);
        }
        Self { tools }
    }

    /// Every tool gets an entry, even with no patterns.
    pub fn with_tools<'a>(mut self, tool_ids: impl IntoIterator<Item = &'a ToolId>) -> Self {
        for t in tool_ids {
            self.tools.entry(t.clone()).or_default();
        }
        self
    }

    pub fn patterns(&self) -> impl Iterator<Item = &Pattern> {
        self.tools.values().flatten()
    }

    pub fn into_patterns(self) -> Vec<Pattern> {
        self.tools.into_values().flatten().collect()
    }

    pub fn len(&self) -> usize {
        self.tools.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("store serializes");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self, StoreError> {
        let store: Self = serde_json::from_str(text).map_err(|e| StoreError::Malformed(e.to_string()))?;
        for (tool, ps) in &store.tools {
            for p in ps {
                p.check().map_err(StoreError::Invalid)?;
                if &p.tool_id != tool {
                    return Err(StoreError::Invalid(format!("{} filed under {tool}", p.pattern_id)));
                }
            }
            let finals = ps.iter().filter(|p| p.status == PatternStatus::Final).count();
            if finals > super::MAX_FINAL_PER_TOOL {
                return Err(StoreError::Invalid(format!("{tool} has {finals} final patterns")));
            }
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let text = fs::read_to_string(path).map_err(|source| StoreError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }
}

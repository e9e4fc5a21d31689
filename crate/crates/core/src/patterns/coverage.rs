use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use super::Pattern;
use crate::domain::{Idx, Reaction};
use crate::llm::{bindings, LlmClient, Schema, TemplateId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    High,
    Medium,
    Low,
}

impl Confidence {
    fn parse(s: &str) -> Confidence {
        match s {
            "high" => Confidence::High,
            "medium" => Confidence::Medium,
            _ => Confidence::Low,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageEntry {
    pub covered: bool,
    pub confidence: Confidence,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    pattern_id: String,
    idx: Idx,
    covered: bool,
    confidence: Confidence,
}

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed coverage line {0}: {1}")]
    MalformedLine(usize, String),
}

/// Append-only memo of coverage judgments. Concurrent inserts keep the first
/// value written for a key.
#[derive(Debug, Default)]
pub struct CoverageCache {
    entries: RwLock<HashMap<(String, Idx), CoverageEntry>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl CoverageCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, pattern_id: &str, idx: Idx) -> Option<CoverageEntry> {
        self.entries.read().get(&(pattern_id.to_string(), idx)).copied()
    }

    /// Returns the stored entry, which is `entry` unless another writer got there first.
    pub fn insert_if_absent(&self, pattern_id: &str, idx: Idx, entry: CoverageEntry) -> CoverageEntry {
        *self.entries.write().entry((pattern_id.to_string(), idx)).or_insert(entry)
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    /// All entries sorted by `(pattern_id, idx)`.
    pub fn snapshot(&self) -> Vec<(String, Idx, CoverageEntry)> {
        let mut out: Vec<_> = self.entries.read().iter().map(|((p, i), e)| (p.clone(), *i, *e)).collect();
        out.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (pattern_id, idx, e) in self.snapshot() {
            let line = CacheLine { pattern_id, idx, covered: e.covered, confidence: e.confidence };
            out.push_str(&serde_json::to_string(&line).expect("cache line serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, CacheError> {
        let cache = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: CacheLine = serde_json::from_str(line).map_err(|e| CacheError::MalformedLine(i + 1, e.to_string()))?;
            cache.insert_if_absent(&l.pattern_id, l.idx, CoverageEntry { covered: l.covered, confidence: l.confidence });
        }
        Ok(cache)
    }

    /// Missing file yields an empty cache.
    pub fn load(path: &Path) -> Result<Self, CacheError> {
        match fs::read_to_string(path) {
            Ok(text) => Self::parse_jsonl(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new()),
            Err(source) => Err(CacheError::Io { path: path.display().to_string(), source }),
        }
    }
}

/// Asks the LLM whether a reaction belongs to a pattern, through the cache.
#[derive(Clone, Copy)]
pub struct CoverageJudge<'a> {
    pub client: &'a LlmClient,
    pub cache: &'a CoverageCache,
}

impl<'a> CoverageJudge<'a> {
    pub fn new(client: &'a LlmClient, cache: &'a CoverageCache) -> Self {
        Self { client, cache }
    }

    /// Coverage is `belongs_to_rule` alone. A terminal LLM failure counts as
    /// not covered and is cached with low confidence.
    pub fn judge(&self, pattern: &Pattern, r: &Reaction) -> bool {
        if let Some(e) = self.cache.get(&pattern.pattern_id, r.idx) {
            self.cache.hits.fetch_add(1, Ordering::Relaxed);
            return e.covered;
        }
        self.cache.misses.fetch_add(1, Ordering::Relaxed);
        let entry = match self.client.ask(TemplateId::PatternMatch, match_bindings(pattern, r), &Schema::PatternMatch) {
            Ok(v) => CoverageEntry {
                covered: v["belongs_to_rule"].as_bool().unwrap_or(false),
                confidence: Confidence::parse(v["confidence"].as_str().unwrap_or("low")),
            },
            Err(e) => {
                log::warn!("coverage of {} on {} failed: {e}", pattern.pattern_id, r.idx);
                CoverageEntry { covered: false, confidence: Confidence::Low }
            }
        };
        self.cache.insert_if_absent(&pattern.pattern_id, r.idx, entry).covered
    }
}

#[derive(Serialize)]
struct ExampleLine<'a> {
    idx: Idx,
    reactants: &'a str,
    product: &'a str,
}

/// Name and explanation are JSON-encoded strings; the example carries no
/// label or prediction.
pub fn match_bindings(pattern: &Pattern, r: &Reaction) -> crate::llm::Bindings {
    let example = ExampleLine { idx: r.idx, reactants: &r.reactants, product: &r.product };
    bindings([
        ("rule_name", serde_json::to_string(&pattern.name).unwrap()),
        ("rule_explanation", serde_json::to_string(&pattern.explanation).unwrap()),
        ("example_json", serde_json::to_string(&example).unwrap()),
    ])
}

//! Utility patterns: diagnostic sampling, extraction, refinement,
//! consolidation, confidence scoring and per-reaction tool selection.

mod coverage;
mod extract;
mod sampling;
mod scoring;
mod store;

use serde::{Deserialize, Serialize};

use crate::domain::{Idx, ToolId};

pub use coverage::{match_bindings, CacheError, Confidence, CoverageCache, CoverageEntry, CoverageJudge};
pub use extract::{extract_all, extract_patterns, subset_dataset_text, ExtractError, ExtractReport};
pub use sampling::{
    disagreement_set, sample_diagnostic_subsets, Cell, DiagnosticSubset, InsufficientCell, SamplingError,
    SamplingReport,
};
pub use scoring::{
    align_score, conf_score, consolidate_patterns, cov_score, finalize_pattern_set, refine_patterns, select_tools,
    ConfStats, ConsolidationReport, ScoreError,
};
pub use store::{PatternStore, StoreError};

/// Number of example reactions every pattern carries.
pub const EXAMPLES_PER_PATTERN: usize = 5;
/// Most Final patterns kept per tool.
pub const MAX_FINAL_PER_TOOL: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PatternStatus {
    Raw,
    Refined,
    Consolidated,
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub pattern_id: String,
    pub tool_id: ToolId,
    pub name: String,
    pub explanation: String,
    pub example_idxs: Vec<Idx>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub align: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conf: Option<f64>,
    /// Pool reactions covered, the denominator of `conf`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<usize>,
    pub status: PatternStatus,
}

impl Pattern {
    pub fn raw(
        pattern_id: impl Into<String>,
        tool_id: impl Into<ToolId>,
        name: impl Into<String>,
        explanation: impl Into<String>,
        example_idxs: Vec<Idx>,
    ) -> Self {
        Self {
            pattern_id: pattern_id.into(),
            tool_id: tool_id.into(),
            name: name.into(),
            explanation: explanation.into(),
            example_idxs,
            align: None,
            cov: None,
            conf: None,
            support: None,
            status: PatternStatus::Raw,
        }
    }

    /// Checks the status-dependent field invariants.
    pub fn check(&self) -> Result<(), String> {
        if self.example_idxs.len() != EXAMPLES_PER_PATTERN {
            return Err(format!("{}: expected {EXAMPLES_PER_PATTERN} examples", self.pattern_id));
        }
        let refined = self.status >= PatternStatus::Refined;
        if refined != (self.align.is_some() && self.cov.is_some()) {
            return Err(format!("{}: align/cov do not match status {:?}", self.pattern_id, self.status));
        }
        let consolidated = self.status >= PatternStatus::Consolidated;
        if consolidated != self.conf.is_some() {
            return Err(format!("{}: conf does not match status {:?}", self.pattern_id, self.status));
        }
        for s in [self.align, self.cov, self.conf].into_iter().flatten() {
            if !(0.0..=1.0).contains(&s) {
                return Err(format!("{}: score {s} outside [0,1]", self.pattern_id));
            }
        }
        Ok(())
    }
}

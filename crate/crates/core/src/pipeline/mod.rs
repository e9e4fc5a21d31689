//! Hierarchy construction, the three-stage inference flow and ablations.

mod infer;
mod train;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::chem::Fingerprinter;
use crate::domain::{Dataset, Idx, Label, Prediction, ToolId};
use crate::tools::{tool_accuracy, AccuracyError, Level, ToolRegistry};

pub use infer::{resolve_conflict, Assets, ResolveError, TOOL_SELECT_CONF_HINT, TOOL_SELECT_TIEBREAK};
pub use train::{build_memory, consolidate_stage, extract_stage, refine_stage, train, ExtractStats, TrainError, Trained};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    WithoutConflict,
    WithoutUtility,
    WithoutHierarchy,
}

impl Ablation {
    pub const ALL: [Ablation; 4] =
        [Ablation::Full, Ablation::WithoutConflict, Ablation::WithoutUtility, Ablation::WithoutHierarchy];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::WithoutConflict => "without_conflict",
            Ablation::WithoutUtility => "without_utility",
            Ablation::WithoutHierarchy => "without_hierarchy",
        }
    }

    pub fn parse(s: &str) -> Option<Ablation> {
        Ablation::ALL.into_iter().find(|a| a.as_str() == s)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Algorithm settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub rho: f64,
    pub m: usize,
    pub n_schedule: Vec<usize>,
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
    pub max_final_per_tool: usize,
    pub l: usize,
    pub k: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub fingerprint: Fingerprinter,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            rho: 25.0,
            m: 100,
            n_schedule: vec![5, 10, 25, 45],
            tau1: 1.0,
            tau2: 1.0,
            tau3: 0.5,
            max_final_per_tool: crate::patterns::MAX_FINAL_PER_TOOL,
            l: 5,
            k: crate::memory::DEFAULT_K,
            seed: 1,
            ablation: Ablation::Full,
            fingerprint: Fingerprinter::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=100.0).contains(&self.rho) {
            return Err(format!("rho {} outside [0, 100]", self.rho));
        }
        for (name, t) in [("tau1", self.tau1), ("tau2", self.tau2), ("tau3", self.tau3)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(format!("{name} {t} outside [0, 1]"));
            }
        }
        if self.n_schedule.is_empty() || self.n_schedule.contains(&0) {
            return Err("n_schedule must be non-empty and positive".into());
        }
        if self.l == 0 || self.k == 0 {
            return Err("l and k must be positive".into());
        }
        if self.fingerprint.width == 0 || self.fingerprint.width % 4 != 0 || self.fingerprint.n_max == 0 {
            return Err("fingerprint width must be a positive multiple of 4 and n_max positive".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the JSON form.
    pub fn digest(&self) -> String {
        crate::util::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    pub rho: f64,
    pub l1: Vec<ToolId>,
    pub l2: Vec<ToolId>,
    pub accuracies: BTreeMap<ToolId, f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HierarchyError {
    #[error("no tools to rank")]
    EmptyToolset,
    #[error(transparent)]
    Accuracy(#[from] AccuracyError),
}

/// `max(1, floor(n * rho / 100))`.
pub fn l1_size(n: usize, rho: f64) -> usize {
    ((n as f64 * rho / 100.0).floor() as usize).clamp(1, n.max(1))
}

/// Ranks tools by validation accuracy (ties by id) and splits off the top
/// `max(1, floor(n * rho / 100))` as the first level.
pub fn build_hierarchy(tool_ids: &[ToolId], val: &Dataset, rho: f64) -> Result<Hierarchy, HierarchyError> {
    if tool_ids.is_empty() {
        return Err(HierarchyError::EmptyToolset);
    }
    let mut ranked: Vec<(ToolId, f64)> =
        tool_ids.iter().map(|t| tool_accuracy(t, val).map(|a| (t.clone(), a))).collect::<Result<_, _>>()?;
    ranked.sort_by(|(ta, a), (tb, b)| b.total_cmp(a).then(ta.cmp(tb)));
    let n1 = l1_size(ranked.len(), rho);
    Ok(Hierarchy {
        rho,
        l1: ranked[..n1].iter().map(|(t, _)| t.clone()).collect(),
        l2: ranked[n1..].iter().map(|(t, _)| t.clone()).collect(),
        accuracies: ranked.into_iter().collect(),
    })
}

impl Hierarchy {
    pub fn level(&self, tool: &str) -> Level {
        if self.l1.iter().any(|t| t == tool) {
            Level::L1
        } else if self.l2.iter().any(|t| t == tool) {
            Level::L2
        } else {
            Level::Unassigned
        }
    }

    /// Writes levels and validation accuracies back to the registry.
    pub fn apply(&self, registry: &mut ToolRegistry) {
        for id in registry.ids() {
            let level = self.level(&id);
            let acc = self.accuracies.get(&id).copied();
            if let Some(tool) = registry.get_mut(&id) {
                tool.record.level = level;
                tool.record.val_accuracy = acc;
            }
        }
    }

    pub fn all_tools(&self) -> Vec<ToolId> {
        self.l1.iter().chain(&self.l2).cloned().collect()
    }

    pub fn levels(&self) -> BTreeMap<ToolId, String> {
        self.all_tools().into_iter().map(|t| (t.clone(), self.level(&t).to_string())).collect()
    }
}

/// The common label when every prediction is the same non-NA value.
pub fn consensus(predictions: &[Prediction]) -> Option<Label> {
    let first = predictions.first()?.label()?;
    predictions.iter().all(|p| p.label() == Some(first)).then_some(first)
}

/// Agreement among non-NA votes, with at least one such vote.
pub fn consensus_ignoring_na(predictions: &[Prediction]) -> Option<Label> {
    let votes: Vec<Prediction> = predictions.iter().copied().filter(|p| !p.is_na()).collect();
    consensus(&votes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    T1Consensus,
    TsConsensus,
    ConflictResolved,
    FallbackDirect,
    FallbackMajority,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionTrace {
    pub idx: Idx,
    pub stage: Stage,
    pub selected_tools: Vec<ToolId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_tool: Option<ToolId>,
    pub demonstrations_used: usize,
    #[serde(rename = "final")]
    pub final_label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Label>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

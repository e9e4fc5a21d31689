use std::collections::BTreeSet;

use serde::Serialize;

use super::{build_hierarchy, Config, Hierarchy, HierarchyError};
use crate::domain::{Dataset, Idx, ToolId};
use crate::llm::LlmClient;
use crate::memory::{BuildReport, ConflictMemory, MemoryError};
use crate::patterns::{
    consolidate_patterns, disagreement_set, extract_all, finalize_pattern_set, refine_patterns,
    sample_diagnostic_subsets, CoverageCache, CoverageJudge, PatternStore, SamplingError,
};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExtractStats {
    pub pool: usize,
    pub subsets: usize,
    pub skipped_subsets: usize,
    pub failed_subsets: usize,
    pub dropped_entries: usize,
    pub patterns: usize,
}

/// Samples diagnostic subsets for every tool and extracts raw patterns.
pub fn extract_stage(
    val: &Dataset,
    hierarchy: &Hierarchy,
    cfg: &Config,
    client: &LlmClient,
) -> Result<(PatternStore, ExtractStats), SamplingError> {
    let pool = disagreement_set(val, &hierarchy.l1)?;
    let tools = hierarchy.all_tools();
    let mut subsets = Vec::new();
    let mut stats = ExtractStats { pool: pool.len(), ..Default::default() };
    for tool in &tools {
        let report = sample_diagnostic_subsets(val, tool, &pool, cfg.m, &cfg.n_schedule, cfg.seed)?;
        if let Some(first) = report.skipped.first() {
            log::info!("{tool}: {} of {} subsets skipped ({first})", report.skipped.len(), cfg.m);
        }
        stats.skipped_subsets += report.skipped.len();
        subsets.extend(report.subsets);
    }
    stats.subsets = subsets.len();
    let report = extract_all(val, &subsets, client);
    stats.failed_subsets = report.failed_subsets.len();
    stats.dropped_entries = report.dropped_entries;
    stats.patterns = report.patterns.len();
    Ok((PatternStore::from_patterns(report.patterns).with_tools(&tools), stats))
}

pub fn refine_stage(raw: PatternStore, val: &Dataset, cfg: &Config, judge: &CoverageJudge) -> PatternStore {
    let tools: Vec<ToolId> = raw.tools.keys().cloned().collect();
    PatternStore::from_patterns(refine_patterns(raw.into_patterns(), val, judge, cfg.tau1, cfg.tau2)).with_tools(&tools)
}

/// Consolidates, scores confidence over the pool and keeps the Final set.
pub fn consolidate_stage(
    refined: PatternStore,
    val: &Dataset,
    hierarchy: &Hierarchy,
    cfg: &Config,
    judge: &CoverageJudge,
) -> Result<(PatternStore, usize, usize), SamplingError> {
    let pool = disagreement_set(val, &hierarchy.l1)?;
    let tools: Vec<ToolId> = refined.tools.keys().cloned().collect();
    let report = consolidate_patterns(refined.into_patterns(), &pool, val, judge);
    let finals = finalize_pattern_set(report.patterns, cfg.tau3, cfg.max_final_per_tool);
    Ok((PatternStore::from_patterns(finals).with_tools(&tools), report.groups_merged, report.fallbacks))
}

pub fn build_memory(
    finals: &PatternStore,
    val: &Dataset,
    hierarchy: &Hierarchy,
    cfg: &Config,
    judge: &CoverageJudge,
) -> Result<(ConflictMemory, BuildReport), MemoryError> {
    let pool: BTreeSet<Idx> = disagreement_set(val, &hierarchy.l1).unwrap_or_default();
    let finals: Vec<_> = finals.patterns().cloned().collect();
    ConflictMemory::build(&pool, &finals, val, judge, &hierarchy.accuracies, &cfg.fingerprint)
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// Outputs of every offline stage.
#[derive(Debug)]
pub struct Trained {
    pub hierarchy: Hierarchy,
    pub raw: PatternStore,
    pub refined: PatternStore,
    pub finals: PatternStore,
    pub memory: ConflictMemory,
    pub extract: ExtractStats,
    pub memory_report: BuildReport,
}

/// Runs hierarchy, extraction, refinement, consolidation and memory
/// construction over the validation split in one go.
pub fn train(val: &Dataset, cfg: &Config, client: &LlmClient, cache: &CoverageCache) -> Result<Trained, TrainError> {
    let tools: Vec<ToolId> = val.tool_ids().cloned().collect();
    let hierarchy = build_hierarchy(&tools, val, cfg.rho)?;
    let judge = CoverageJudge::new(client, cache);
    let (raw, extract) = extract_stage(val, &hierarchy, cfg, client)?;
    let refined = refine_stage(raw.clone(), val, cfg, &judge);
    let (finals, _, _) = consolidate_stage(refined.clone(), val, &hierarchy, cfg, &judge)?;
    let (memory, memory_report) = build_memory(&finals, val, &hierarchy, cfg, &judge)?;
    Ok(Trained { hierarchy, raw, refined, finals, memory, extract, memory_report })
}

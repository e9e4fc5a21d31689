use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;

use super::{CoverageJudge, Pattern, PatternStatus};
use crate::domain::{Dataset, Idx, Reaction, ToolId};
use crate::llm::{bindings, LlmClient, Schema, TemplateId};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScoreError {
    #[error("example {0} missing from dataset or unlabeled")]
    MissingExample(Idx),
    #[error("pattern {0} covers no pool reaction")]
    NoCoveredReactions(String),
}

fn examples<'d>(pattern: &Pattern, dataset: &'d Dataset) -> Result<Vec<&'d Reaction>, ScoreError> {
    pattern
        .example_idxs
        .iter()
        .map(|&i| dataset.get(i).filter(|r| r.label.is_some()).ok_or(ScoreError::MissingExample(i)))
        .collect()
}

/// Share of the examples the pattern's tool predicts correctly; NA is wrong.
pub fn align_score(pattern: &Pattern, dataset: &Dataset) -> Result<f64, ScoreError> {
    let ex = examples(pattern, dataset)?;
    let correct = ex
        .iter()
        .filter(|r| dataset.prediction(&pattern.tool_id, r.idx).is_correct(r.label.expect("checked")))
        .count();
    Ok(correct as f64 / ex.len() as f64)
}

/// Share of the examples the pattern covers.
pub fn cov_score(pattern: &Pattern, dataset: &Dataset, judge: &CoverageJudge) -> Result<f64, ScoreError> {
    let ex = examples(pattern, dataset)?;
    let covered = ex.iter().filter(|r| judge.judge(pattern, r)).count();
    Ok(covered as f64 / ex.len() as f64)
}

/// Scores every raw pattern and keeps those with `align >= tau1` and `cov >= tau2`.
pub fn refine_patterns(raw: Vec<Pattern>, dataset: &Dataset, judge: &CoverageJudge, tau1: f64, tau2: f64) -> Vec<Pattern> {
    let scored: Vec<_> = raw
        .into_par_iter()
        .map(|p| {
            let scores = align_score(&p, dataset).and_then(|a| cov_score(&p, dataset, judge).map(|c| (a, c)));
            (p, scores)
        })
        .collect();
    let mut kept = Vec::new();
    for (mut p, scores) in scored {
        match scores {
            Ok((align, cov)) if align >= tau1 && cov >= tau2 => {
                p.align = Some(align);
                p.cov = Some(cov);
                p.status = PatternStatus::Refined;
                kept.push(p);
            }
            Ok((align, cov)) => log::debug!("{} dropped: align {align}, cov {cov}", p.pattern_id),
            Err(e) => log::warn!("{} dropped: {e}", p.pattern_id),
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConfStats {
    pub covered: usize,
    pub correct: usize,
    pub conf: f64,
}

/// Correct-when-covered rate of the pattern's tool over the pool.
pub fn conf_score(
    pattern: &Pattern,
    pool: &BTreeSet<Idx>,
    dataset: &Dataset,
    judge: &CoverageJudge,
) -> Result<ConfStats, ScoreError> {
    let mut covered = 0;
    let mut correct = 0;
    for &idx in pool {
        let r = dataset.get(idx).ok_or(ScoreError::MissingExample(idx))?;
        let label = r.label.ok_or(ScoreError::MissingExample(idx))?;
        if judge.judge(pattern, r) {
            covered += 1;
            if dataset.prediction(&pattern.tool_id, idx).is_correct(label) {
                correct += 1;
            }
        }
    }
    if covered == 0 {
        return Err(ScoreError::NoCoveredReactions(pattern.pattern_id.clone()));
    }
    Ok(ConfStats { covered, correct, conf: correct as f64 / covered as f64 })
}

#[derive(Debug, Default)]
pub struct ConsolidationReport {
    pub patterns: Vec<Pattern>,
    pub groups_merged: usize,
    pub fallbacks: usize,
    /// Survivors dropped because they cover no pool reaction.
    pub uncovered: usize,
}

#[derive(Serialize)]
struct Candidate<'a> {
    index: usize,
    name: &'a str,
    explanation: &'a str,
    examples_idx: &'a [Idx],
}

fn fallback_survivor(group: &[Pattern]) -> usize {
    let mut best = 0;
    for (i, p) in group.iter().enumerate().skip(1) {
        let a = p.align.unwrap_or(0.0);
        let b = group[best].align.unwrap_or(0.0);
        if a > b || (a == b && p.pattern_id < group[best].pattern_id) {
            best = i;
        }
    }
    best
}

fn pick_survivor(group: &[Pattern], client: &LlmClient) -> (usize, bool) {
    if group.len() == 1 {
        return (0, false);
    }
    let candidates: Vec<_> = group
        .iter()
        .enumerate()
        .map(|(index, p)| Candidate { index, name: &p.name, explanation: &p.explanation, examples_idx: &p.example_idxs })
        .collect();
    let b = bindings([
        ("n_rules", group.len().to_string()),
        ("rule_name", group[0].name.clone()),
        ("candidates_json", serde_json::to_string_pretty(&candidates).expect("candidates serialize")),
    ]);
    match client.ask(TemplateId::Consolidation, b, &Schema::Consolidation) {
        Ok(v) => match v["keep_index"].as_i64() {
            Some(k) if (0..group.len() as i64).contains(&k) => (k as usize, false),
            k => {
                log::info!("group {:?}: keep_index {k:?} out of range, using fallback", group[0].name);
                (fallback_survivor(group), true)
            }
        },
        Err(e) => {
            log::warn!("group {:?}: consolidation failed ({e}), using fallback", group[0].name);
            (fallback_survivor(group), true)
        }
    }
}

/// Merges same-name patterns of each tool into one survivor, then scores the
/// survivors' confidence over `pool`.
pub fn consolidate_patterns(
    refined: Vec<Pattern>,
    pool: &BTreeSet<Idx>,
    dataset: &Dataset,
    judge: &CoverageJudge,
) -> ConsolidationReport {
    let mut groups: BTreeMap<(ToolId, String), Vec<Pattern>> = BTreeMap::new();
    for p in refined {
        groups.entry((p.tool_id.clone(), p.name.clone())).or_default().push(p);
    }
    let groups: Vec<Vec<Pattern>> = groups
        .into_values()
        .map(|mut g| {
            g.sort_by(|a, b| a.pattern_id.cmp(&b.pattern_id));
            g
        })
        .collect();

    let picks: Vec<_> = groups.par_iter().map(|g| pick_survivor(g, judge.client)).collect();
    let mut report = ConsolidationReport::default();
    let mut survivors = Vec::new();
    for (mut group, (keep, fallback)) in groups.into_iter().zip(picks) {
        report.groups_merged += usize::from(group.len() > 1);
        report.fallbacks += usize::from(fallback);
        survivors.push(group.swap_remove(keep));
    }

    let scored: Vec<_> = survivors.into_par_iter().map(|p| {
        let stats = conf_score(&p, pool, dataset, judge);
        (p, stats)
    }).collect();
    for (mut p, stats) in scored {
        match stats {
            Ok(s) => {
                p.conf = Some(s.conf);
                p.support = Some(s.covered);
                p.status = PatternStatus::Consolidated;
                report.patterns.push(p);
            }
            Err(e) => {
                log::info!("{e}; dropped");
                report.uncovered += 1;
            }
        }
    }
    report.patterns.sort_by(|a, b| (&a.tool_id, &a.pattern_id).cmp(&(&b.tool_id, &b.pattern_id)));
    report
}

fn final_order(a: &Pattern, b: &Pattern) -> Ordering {
    let conf = |p: &Pattern| p.conf.unwrap_or(f64::NEG_INFINITY);
    conf(b)
        .total_cmp(&conf(a))
        .then(b.support.unwrap_or(0).cmp(&a.support.unwrap_or(0)))
        .then(a.pattern_id.cmp(&b.pattern_id))
}

/// Per tool: keep `conf >= tau3`, best first, at most `max_per_tool`.
pub fn finalize_pattern_set(consolidated: Vec<Pattern>, tau3: f64, max_per_tool: usize) -> Vec<Pattern> {
    let mut by_tool: BTreeMap<ToolId, Vec<Pattern>> = BTreeMap::new();
    for p in consolidated {
        if p.conf.is_some_and(|c| c >= tau3) {
            by_tool.entry(p.tool_id.clone()).or_default().push(p);
        }
    }
    let mut out = Vec::new();
    for (_, mut ps) in by_tool {
        ps.sort_by(final_order);
        ps.truncate(max_per_tool);
        for mut p in ps {
            p.status = PatternStatus::Final;
            out.push(p);
        }
    }
    out
}

/// Tools whose Final patterns cover `r`, ranked by the confidence of their
/// best covering pattern, then validation accuracy, then tool id; at most `l`.
pub fn select_tools(
    r: &Reaction,
    finals: &[Pattern],
    l: usize,
    judge: &CoverageJudge,
    val_accuracy: &BTreeMap<ToolId, f64>,
) -> Vec<(ToolId, Pattern)> {
    let mut by_tool: BTreeMap<&str, Vec<&Pattern>> = BTreeMap::new();
    for p in finals {
        by_tool.entry(p.tool_id.as_str()).or_default().push(p);
    }
    let mut best: Vec<(ToolId, Pattern)> = Vec::new();
    for (tool, mut ps) in by_tool {
        ps.sort_by(|a, b| final_order(a, b));
        if let Some(p) = ps.into_iter().find(|p| judge.judge(p, r)) {
            best.push((tool.to_string(), p.clone()));
        }
    }
    let acc = |t: &str| val_accuracy.get(t).copied().unwrap_or(0.0);
    best.sort_by(|(ta, pa), (tb, pb)| {
        pb.conf
            .unwrap_or(0.0)
            .total_cmp(&pa.conf.unwrap_or(0.0))
            .then(acc(tb).total_cmp(&acc(ta)))
            .then(ta.cmp(tb))
    });
    best.truncate(l);
    best
}

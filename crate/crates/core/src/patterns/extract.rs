use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use super::{DiagnosticSubset, Pattern, EXAMPLES_PER_PATTERN};
use crate::domain::{Dataset, Idx, Label, Prediction};
use crate::llm::{bindings, LlmClient, LlmError, Schema, TemplateId};

#[derive(Debug, thiserror::Error)]
pub enum ExtractError {
    #[error("subset member {0} missing from dataset or unlabeled")]
    MissingReaction(Idx),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Serialize)]
struct SubsetLine<'a> {
    idx: Idx,
    reactants: &'a str,
    product: &'a str,
    label: Label,
    prediction: Prediction,
}

/// The subset as JSON Lines sorted by idx, one reaction per line.
pub fn subset_dataset_text(dataset: &Dataset, subset: &DiagnosticSubset) -> Result<String, ExtractError> {
    let members: BTreeSet<Idx> = subset.members().collect();
    let mut out = String::new();
    for idx in members {
        let r = dataset.get(idx).ok_or(ExtractError::MissingReaction(idx))?;
        let label = r.label.ok_or(ExtractError::MissingReaction(idx))?;
        let line = SubsetLine {
            idx,
            reactants: &r.reactants,
            product: &r.product,
            label,
            prediction: dataset.prediction(&subset.tool_id, idx),
        };
        out.push_str(&serde_json::to_string(&line).expect("subset line serializes"));
        out.push('\n');
    }
    Ok(out)
}

fn local_accuracy(dataset: &Dataset, subset: &DiagnosticSubset) -> f64 {
    let total = subset.members().count();
    let correct = subset
        .members()
        .filter(|&i| dataset.label(i).is_some_and(|l| dataset.prediction(&subset.tool_id, i).is_correct(l)))
        .count();
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

/// Runs one extraction call and returns Raw patterns. Entries whose examples
/// are not exactly five distinct subset members are dropped.
pub fn extract_patterns(
    dataset: &Dataset,
    subset: &DiagnosticSubset,
    client: &LlmClient,
) -> Result<(Vec<Pattern>, usize), ExtractError> {
    let text = subset_dataset_text(dataset, subset)?;
    let v = client.ask(TemplateId::PatternExtraction, bindings([("dataset_text", text)]), &Schema::PatternExtraction)?;

    let local = local_accuracy(dataset, subset) * 100.0;
    let claimed = match &v["tool_acc"] {
        Value::String(s) => s.trim().trim_end_matches('%').parse::<f64>().ok(),
        Value::Number(n) => n.as_f64(),
        _ => None,
    };
    match claimed {
        Some(c) if (c - local).abs() > 0.5 => {
            log::info!("{} subset {}: reported tool_acc {c:.2} vs local {local:.2}", subset.tool_id, subset.subset_no)
        }
        _ => {}
    }

    let mut patterns = Vec::new();
    let mut dropped = 0;
    for (k, e) in v["often_correct_on"].as_array().into_iter().flatten().enumerate() {
        let idxs: Vec<Idx> = e["examples_idx"].as_array().into_iter().flatten().filter_map(Value::as_u64).collect();
        let distinct: BTreeSet<Idx> = idxs.iter().copied().collect();
        if idxs.len() != EXAMPLES_PER_PATTERN || distinct.len() != idxs.len() || !idxs.iter().all(|&i| subset.contains(i)) {
            log::warn!("{} subset {} entry {k}: examples {idxs:?} rejected", subset.tool_id, subset.subset_no);
            dropped += 1;
            continue;
        }
        patterns.push(Pattern::raw(
            format!("{}/m{:03}/{k}", subset.tool_id, subset.subset_no),
            subset.tool_id.clone(),
            e["name"].as_str().unwrap_or_default().trim(),
            e["explanation"].as_str().unwrap_or_default(),
            idxs,
        ));
    }
    Ok((patterns, dropped))
}

#[derive(Debug, Default)]
pub struct ExtractReport {
    pub patterns: Vec<Pattern>,
    pub dropped_entries: usize,
    /// `(tool_id, subset_no)` of subsets whose call failed terminally.
    pub failed_subsets: Vec<(String, usize)>,
}

/// Extracts over every subset concurrently; output order follows `subsets`.
pub fn extract_all(dataset: &Dataset, subsets: &[DiagnosticSubset], client: &LlmClient) -> ExtractReport {
    let results: Vec<_> = subsets.par_iter().map(|s| (s, extract_patterns(dataset, s, client))).collect();
    let mut report = ExtractReport::default();
    for (s, result) in results {
        match result {
            Ok((patterns, dropped)) => {
                report.patterns.extend(patterns);
                report.dropped_entries += dropped;
            }
            Err(e) => {
                log::warn!("{} subset {} skipped: {e}", s.tool_id, s.subset_no);
                report.failed_subsets.push((s.tool_id.clone(), s.subset_no));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Reaction, Split};
    use crate::llm::{LlmBackend, LlmRequest};
    use std::sync::Arc;

    struct Fixed(String);

    impl LlmBackend for Fixed {
        fn complete(&self, _: &LlmRequest) -> Result<String, LlmError> {
            Ok(self.0.clone())
        }
        fn tag(&self) -> String {
            "fixed".into()
        }
    }

    fn fixture() -> (Dataset, DiagnosticSubset) {
        let reactions = (0..8).map(|i| Reaction::new(i, "CC", "CO", Label::from_int((i % 2) as i64))).collect();
        let mut ds = Dataset::new(Split::Validation, reactions).unwrap();
        ds.set_column("t", (0..8).map(|i| (i, if i == 0 { Prediction::NA } else { Prediction::Pred1 })).collect());
        let subset = DiagnosticSubset {
            tool_id: "t".into(),
            subset_no: 3,
            n: 2,
            cells: [vec![1, 3], vec![0, 5], vec![2, 4], vec![6, 7]],
        };
        (ds, subset)
    }

    fn client(reply: &str) -> LlmClient {
        LlmClient::new(Arc::new(Fixed(reply.to_string())))
    }

    #[test]
    fn dataset_text_is_sorted_jsonl() {
        let (ds, subset) = fixture();
        let text = subset_dataset_text(&ds, &subset).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 8);
        assert_eq!(lines[0], r#"{"idx":0,"reactants":"CC","product":"CO","label":0,"prediction":"NA"}"#);
        assert_eq!(lines[1], r#"{"idx":1,"reactants":"CC","product":"CO","label":1,"prediction":1}"#);
    }

    #[test]
    fn two_entries_become_two_raw_patterns() {
        let (ds, subset) = fixture();
        let reply = r#"{"tool_acc":"37.50","often_correct_on":[
            {"name":"A","explanation":"a","examples_idx":[1,3,5,7,2]},
            {"name":"B","explanation":"b","examples_idx":[0,1,2,3,4]}]}"#;
        let (patterns, dropped) = extract_patterns(&ds, &subset, &client(reply)).unwrap();
        assert_eq!(dropped, 0);
        assert_eq!(patterns.len(), 2);
        assert_eq!(patterns[0].pattern_id, "t/m003/0");
        assert_eq!(patterns[1].name, "B");
        assert!(patterns.iter().all(|p| p.status == super::super::PatternStatus::Raw));
    }

    #[test]
    fn foreign_or_short_examples_are_dropped() {
        let (ds, subset) = fixture();
        let reply = r#"{"often_correct_on":[
            {"name":"A","explanation":"a","examples_idx":[1,3,5,7,99]},
            {"name":"B","explanation":"b","examples_idx":[1,3,5,7]},
            {"name":"C","explanation":"c","examples_idx":[1,1,3,5,7]},
            {"name":"D","explanation":"d","examples_idx":[1,3,5,7,6]}]}"#;
        let (patterns, dropped) = extract_patterns(&ds, &subset, &client(reply)).unwrap();
        assert_eq!(dropped, 3);
        assert_eq!(patterns.iter().map(|p| p.name.as_str()).collect::<Vec<_>>(), ["D"]);
    }

    #[test]
    fn terminal_failure_skips_subset() {
        let (ds, subset) = fixture();
        let report = extract_all(&ds, &[subset], &client("not json at all"));
        assert!(report.patterns.is_empty());
        assert_eq!(report.failed_subsets, vec![("t".to_string(), 3)]);
    }
}

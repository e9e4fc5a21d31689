use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use super::{consensus, consensus_ignoring_na, Ablation, Config, DecisionTrace, Hierarchy, Stage};
use crate::domain::{Dataset, Label, Prediction, Reaction, ToolId};
use crate::eval::{self, majority_vote, Provenance, RunReport};
use crate::llm::{bindings, LlmClient, Schema, TemplateId, ABSTAIN};
use crate::memory::{cands_section, retrieve_demonstrations, CandidateView, ConflictMemory, ContrastiveInstance, Elimination};
use crate::patterns::{select_tools, CoverageCache, CoverageJudge, Pattern};
use crate::tools::{direct_ask, tool_accuracy, ToolRegistry};

pub const TOOL_SELECT_CONF_HINT: &str =
    "- conf is the historical accuracy of the tool on reactions its rule covers; prefer higher conf when rules fit equally well.\n";
pub const TOOL_SELECT_TIEBREAK: &str = "- If candidates remain tied, choose the one listed first.\n";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ResolveError {
    #[error("no candidates")]
    NoCandidates,
    #[error("resolver abstained")]
    Abstain,
    #[error("resolver chose {0}, whose prediction is NA")]
    NaChoice(ToolId),
    #[error("resolver call failed: {0}")]
    Llm(String),
}

#[derive(Serialize)]
struct DemoView<'a> {
    reactants: &'a str,
    product: &'a str,
    trusted_tool: &'a str,
    evidence: &'a [String],
    eliminated: &'a [Elimination],
    final_reason: &'a str,
}

fn demos_section(demos: &[&ContrastiveInstance]) -> String {
    if demos.is_empty() {
        return String::new();
    }
    let views: Vec<DemoView> = demos
        .iter()
        .map(|d| DemoView {
            reactants: &d.reactants,
            product: &d.product,
            trusted_tool: &d.rationale.tool,
            evidence: &d.rationale.evidence,
            eliminated: &d.rationale.elimination,
            final_reason: &d.rationale.final_reason,
        })
        .collect();
    format!(
        "\nDemonstrations from similar reactions (JSON):\n{}\n",
        serde_json::to_string_pretty(&views).expect("demonstrations serialize")
    )
}

/// Asks the resolver to trust one candidate; the label is that tool's prediction.
pub fn resolve_conflict(
    r: &Reaction,
    cands: &[(ToolId, Pattern, Prediction)],
    demos: &[&ContrastiveInstance],
    client: &LlmClient,
) -> Result<(ToolId, Label), ResolveError> {
    if cands.is_empty() {
        return Err(ResolveError::NoCandidates);
    }
    let views: Vec<CandidateView> = cands.iter().map(|(t, p, pred)| CandidateView::new(t, *pred, p)).collect();
    let allowed: Vec<ToolId> = cands.iter().map(|(t, _, _)| t.clone()).collect();
    let b = bindings([
        ("reactants", r.reactants.clone()),
        ("product", r.product.clone()),
        ("cands_section", cands_section(&views)),
        ("conf_hint", TOOL_SELECT_CONF_HINT.to_string()),
        ("tiebreak", TOOL_SELECT_TIEBREAK.to_string()),
        ("demos_section", demos_section(demos)),
        ("allowed_str", allowed.join(", ")),
    ]);
    let v = client
        .ask(TemplateId::ToolSelect, b, &Schema::ToolSelect { allowed })
        .map_err(|e| ResolveError::Llm(e.to_string()))?;
    let tool = v["tool"].as_str().unwrap_or(ABSTAIN);
    if tool == ABSTAIN {
        return Err(ResolveError::Abstain);
    }
    let (_, _, pred) = cands.iter().find(|(t, _, _)| t == tool).expect("schema restricts the tool");
    pred.label().map(|l| (tool.to_string(), l)).ok_or_else(|| ResolveError::NaChoice(tool.to_string()))
}

/// Everything inference needs, loaded once.
pub struct Assets {
    pub config: Config,
    pub hierarchy: Hierarchy,
    pub finals: Vec<Pattern>,
    pub memory: ConflictMemory,
    pub registry: ToolRegistry,
    pub client: LlmClient,
    pub cache: CoverageCache,
    /// Name to SHA-256 of every input artifact, for provenance.
    pub asset_digests: BTreeMap<String, String>,
}

impl Assets {
    fn judge(&self) -> CoverageJudge<'_> {
        CoverageJudge::new(&self.client, &self.cache)
    }

    /// Queries every tool's provider, then decides.
    pub fn predict_one(&self, r: &Reaction) -> DecisionTrace {
        let mut preds = BTreeMap::new();
        let mut diags = Vec::new();
        for tool in self.hierarchy.all_tools() {
            let (p, d) = self.registry.predict(&tool, r);
            preds.insert(tool, p);
            diags.extend(d.map(|d| format!("{}: {}", d.tool_id, d.message)));
        }
        let mut trace = self.decide(r, &preds);
        trace.diagnostics.splice(0..0, diags);
        trace
    }

    /// The staged decision for one reaction given all tool predictions.
    /// Missing tools count as NA.
    pub fn decide(&self, r: &Reaction, preds: &BTreeMap<ToolId, Prediction>) -> DecisionTrace {
        let pred = |t: &str| preds.get(t).copied().unwrap_or(Prediction::NA);
        let all = self.hierarchy.all_tools();
        let mut trace = DecisionTrace {
            idx: r.idx,
            stage: Stage::FallbackMajority,
            selected_tools: vec![],
            chosen_tool: None,
            demonstrations_used: 0,
            final_label: Label::Infeasible,
            gold: r.label,
            diagnostics: vec![],
        };
        let vote = |tools: &[ToolId]| majority_vote(&tools.iter().map(|t| pred(t)).collect::<Vec<_>>(), None);

        if self.config.ablation == Ablation::WithoutHierarchy {
            trace.final_label = vote(&all);
            return trace;
        }
        let t1: Vec<Prediction> = self.hierarchy.l1.iter().map(|t| pred(t)).collect();
        if let Some(label) = consensus(&t1) {
            trace.stage = Stage::T1Consensus;
            trace.final_label = label;
            return trace;
        }
        if self.config.ablation == Ablation::WithoutUtility {
            trace.final_label = vote(&all);
            return trace;
        }

        let selected = select_tools(r, &self.finals, self.config.l, &self.judge(), &self.hierarchy.accuracies);
        trace.selected_tools = selected.iter().map(|(t, _)| t.clone()).collect();
        let sel_preds: Vec<Prediction> = trace.selected_tools.iter().map(|t| pred(t)).collect();
        if let Some(label) = consensus_ignoring_na(&sel_preds) {
            trace.stage = Stage::TsConsensus;
            trace.final_label = label;
            return trace;
        }
        if self.config.ablation == Ablation::WithoutConflict {
            let pool = if selected.is_empty() { &all } else { &trace.selected_tools };
            trace.final_label = vote(pool);
            return trace;
        }

        if !selected.is_empty() {
            let demos = retrieve_demonstrations(&self.memory, r, self.config.k, self.config.seed, &self.config.fingerprint);
            trace.demonstrations_used = demos.len();
            let cands: Vec<(ToolId, Pattern, Prediction)> =
                selected.into_iter().map(|(t, p)| (t.clone(), p, pred(&t))).collect();
            match resolve_conflict(r, &cands, &demos, &self.client) {
                Ok((tool, label)) => {
                    trace.stage = Stage::ConflictResolved;
                    trace.chosen_tool = Some(tool);
                    trace.final_label = label;
                    return trace;
                }
                Err(e) => trace.diagnostics.push(format!("conflict: {e}")),
            }
        } else {
            trace.diagnostics.push("conflict: no covering tools".into());
        }

        match direct_ask(&self.client, r) {
            Ok(p) => {
                trace.stage = Stage::FallbackDirect;
                trace.final_label = p.label().unwrap_or(Label::Infeasible);
            }
            Err(e) => {
                trace.diagnostics.push(format!("direct: {e}"));
                let pool = if trace.selected_tools.is_empty() { &all } else { &trace.selected_tools };
                trace.final_label = vote(pool);
            }
        }
        trace
    }

    /// Predicts a whole split. Traces come back in dataset order whatever
    /// the thread count, so equal inputs give byte-identical reports.
    pub fn run(&self, dataset: &Dataset) -> RunReport {
        let (columns, diagnostics) = self.registry.prediction_columns(dataset);
        let reactions: Vec<&Reaction> = dataset.reactions.iter().collect();
        let traces: Vec<DecisionTrace> = reactions
            .par_iter()
            .map(|r| {
                let preds: BTreeMap<ToolId, Prediction> = columns
                    .iter()
                    .map(|(t, col)| (t.clone(), col.get(&r.idx).copied().unwrap_or(Prediction::NA)))
                    .collect();
                let mut trace = self.decide(r, &preds);
                let mine = diagnostics.iter().filter(|d| d.idx == r.idx).map(|d| format!("{}: {}", d.tool_id, d.message));
                trace.diagnostics.splice(0..0, mine);
                trace
            })
            .collect();

        let mut scored = dataset.clone();
        for (t, col) in columns {
            scored.set_column(t, col);
        }
        let labeled = dataset.is_labeled();
        let all = self.hierarchy.all_tools();
        let metrics = labeled
            .then(|| eval::Metrics::from_pairs(traces.iter().map(|t| (t.gold.expect("labeled"), t.final_label))).ok())
            .flatten();
        let mut baselines = BTreeMap::new();
        let mut full_acc = BTreeMap::new();
        if labeled && !dataset.is_empty() {
            if let Ok(a) = eval::vote_accuracy(&scored, &all, None) {
                baselines.insert("majority_vote".to_string(), a);
            }
            let w: Vec<f64> = all.iter().map(|t| self.hierarchy.accuracies.get(t).copied().unwrap_or(0.0)).collect();
            if let Ok(a) = eval::vote_accuracy(&scored, &all, Some(&w)) {
                baselines.insert("weighted_vote".to_string(), a);
            }
            if let Ok(a) = eval::oracle_upper_bound(&scored) {
                baselines.insert("oracle_any_correct".to_string(), a);
            }
            for t in &all {
                if let Ok(a) = tool_accuracy(t, &scored) {
                    full_acc.insert(t.clone(), a);
                }
            }
            if let Some((best, a)) = full_acc.iter().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(a.0))) {
                baselines.insert(format!("best_tool:{best}"), *a);
            }
        }
        let categories = eval::category_breakdown(&traces);
        let tool_usage = eval::tool_usage_report(&traces, &full_acc, &self.hierarchy.levels());
        RunReport {
            ablation: self.config.ablation,
            n: traces.len(),
            metrics,
            baselines,
            categories,
            tool_usage,
            provenance: Provenance {
                seed: self.config.seed,
                config_digest: self.config.digest(),
                assets: self.asset_digests.clone(),
                backend: self.client.backend_tag(),
            },
            traces,
        }
    }
}

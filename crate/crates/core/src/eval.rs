//! Metrics, voting baselines and the breakdown tables of a run.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, Label, Prediction, ToolId};
use crate::pipeline::{Ablation, DecisionTrace, Stage};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("no predictions to evaluate")]
    EmptyInput,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("reaction {0} has no label")]
    MissingLabel(u64),
}

/// Feasible is the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Swaps the roles of the two classes.
    pub fn swapped(&self) -> Self {
        Self { tp: self.tn, tn: self.tp, fp: self.fn_, fn_: self.fp }
    }

    pub fn add(&mut self, gold: Label, predicted: Label) {
        match (gold, predicted) {
            (Label::Feasible, Label::Feasible) => self.tp += 1,
            (Label::Infeasible, Label::Feasible) => self.fp += 1,
            (Label::Infeasible, Label::Infeasible) => self.tn += 1,
            (Label::Feasible, Label::Infeasible) => self.fn_ += 1,
        }
    }
}

/// Counts `(gold, predicted)` pairs.
pub fn confusion_counts(pairs: impl IntoIterator<Item = (Label, Label)>) -> Result<ConfusionCounts, EvalError> {
    let mut c = ConfusionCounts::default();
    for (g, p) in pairs {
        c.add(g, p);
    }
    if c.total() == 0 {
        return Err(EvalError::EmptyInput);
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMetrics {
    pub overall: Option<f64>,
    pub feasible: Option<f64>,
    pub infeasible: Option<f64>,
}

pub fn accuracy_metrics(c: &ConfusionCounts) -> AccuracyMetrics {
    AccuracyMetrics {
        overall: ratio(c.tp + c.tn, c.total()),
        feasible: ratio(c.tp, c.tp + c.fn_),
        infeasible: ratio(c.tn, c.tn + c.fp),
    }
}

fn f1_positive(tp: u64, fp: u64, fn_: u64) -> Option<f64> {
    let precision = ratio(tp, tp + fp)?;
    let recall = ratio(tp, tp + fn_)?;
    if precision + recall == 0.0 {
        return None;
    }
    Some(2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub feasible: Option<f64>,
    pub infeasible: Option<f64>,
}

/// F1 with each class taken as positive in turn; absent when undefined.
pub fn f1_per_class(c: &ConfusionCounts) -> F1Scores {
    F1Scores { feasible: f1_positive(c.tp, c.fp, c.fn_), infeasible: f1_positive(c.tn, c.fn_, c.fp) }
}

/// Matthews correlation. The numerator and the product under the root are
/// exact integers; an empty marginal gives 0.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, fp, tn, fn_) = (c.tp as i128, c.fp as i128, c.tn as i128, c.fn_ as i128);
    let num = tp * tn - fp * fn_;
    let den = ((tp + fp) * (tp + fn_)) as u128 * ((tn + fp) * (tn + fn_)) as u128;
    if den == 0 {
        log::debug!("mcc undefined for {c:?}; reporting 0");
        return 0.0;
    }
    num as f64 / (den as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub counts: ConfusionCounts,
    pub acc_overall: Option<f64>,
    pub acc_feasible: Option<f64>,
    pub acc_infeasible: Option<f64>,
    pub f1_feasible: Option<f64>,
    pub f1_infeasible: Option<f64>,
    pub mcc: f64,
}

impl Metrics {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let acc = accuracy_metrics(&counts);
        let f1 = f1_per_class(&counts);
        Self {
            counts,
            acc_overall: acc.overall,
            acc_feasible: acc.feasible,
            acc_infeasible: acc.infeasible,
            f1_feasible: f1.feasible,
            f1_infeasible: f1.infeasible,
            mcc: mcc(&counts),
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Result<Self, EvalError> {
        confusion_counts(pairs).map(Self::from_counts)
    }
}

/// Share of reactions on which at least one tool is right.
pub fn oracle_upper_bound(dataset: &Dataset) -> Result<f64, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let tools: Vec<&ToolId> = dataset.tool_ids().collect();
    let mut hit = 0usize;
    for r in &dataset.reactions {
        let label = r.label.ok_or(EvalError::MissingLabel(r.idx))?;
        if tools.iter().any(|t| dataset.prediction(t, r.idx).is_correct(label)) {
            hit += 1;
        }
    }
    Ok(hit as f64 / dataset.len() as f64)
}

/// NA is ignored. With weights, each side sums the weights of its voters.
/// Ties and all-NA go to Infeasible.
pub fn majority_vote(predictions: &[Prediction], weights: Option<&[f64]>) -> Label {
    let (mut yes, mut no) = (0.0, 0.0);
    for (i, p) in predictions.iter().enumerate() {
        let w = weights.map_or(1.0, |ws| ws[i]);
        match p {
            Prediction::Pred1 => yes += w,
            Prediction::Pred0 => no += w,
            Prediction::NA => {}
        }
    }
    if yes > no {
        Label::Feasible
    } else {
        Label::Infeasible
    }
}

/// Accuracy of voting over `tools` on every reaction, optionally weighted.
pub fn vote_accuracy(dataset: &Dataset, tools: &[ToolId], weights: Option<&[f64]>) -> Result<f64, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut correct = 0usize;
    for r in &dataset.reactions {
        let label = r.label.ok_or(EvalError::MissingLabel(r.idx))?;
        let preds: Vec<Prediction> = tools.iter().map(|t| dataset.prediction(t, r.idx)).collect();
        if majority_vote(&preds, weights) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub count: usize,
    /// Percent of all traces.
    pub proportion: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Categories {
    pub t1: CategoryStats,
    pub ts: CategoryStats,
    pub conflict: CategoryStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    T1,
    Ts,
    Conflict,
}

impl Category {
    pub fn of(stage: Stage) -> Category {
        match stage {
            Stage::T1Consensus => Category::T1,
            Stage::TsConsensus => Category::Ts,
            _ => Category::Conflict,
        }
    }
}

pub fn category_breakdown(traces: &[DecisionTrace]) -> Categories {
    let total = traces.len();
    let stats = |cat: Category| {
        let members: Vec<&DecisionTrace> = traces.iter().filter(|t| Category::of(t.stage) == cat).collect();
        let labeled: Vec<_> = members.iter().filter_map(|t| t.gold.map(|g| g == t.final_label)).collect();
        CategoryStats {
            count: members.len(),
            proportion: if total == 0 { 0.0 } else { 100.0 * members.len() as f64 / total as f64 },
            accuracy: ratio(labeled.iter().filter(|c| **c).count() as u64, labeled.len() as u64),
        }
    };
    Categories { t1: stats(Category::T1), ts: stats(Category::Ts), conflict: stats(Category::Conflict) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolUsage {
    pub level: String,
    pub selected_count: usize,
    pub selected_correct: usize,
    pub selected_acc: Option<f64>,
    pub full_acc: Option<f64>,
    /// Selected-case accuracy against full accuracy: "up", "down", "same" or "-".
    pub trend: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ToolUsageReport {
    pub tools: BTreeMap<ToolId, ToolUsage>,
    /// Traces that ended in a fallback stage.
    pub failures: usize,
    pub failure_correct: usize,
}

/// Who was trusted at conflict resolution, and how that went.
pub fn tool_usage_report(
    traces: &[DecisionTrace],
    full_accuracy: &BTreeMap<ToolId, f64>,
    levels: &BTreeMap<ToolId, String>,
) -> ToolUsageReport {
    let mut report = ToolUsageReport::default();
    for (tool, acc) in full_accuracy {
        report.tools.insert(
            tool.clone(),
            ToolUsage {
                level: levels.get(tool).cloned().unwrap_or_else(|| "-".into()),
                selected_count: 0,
                selected_correct: 0,
                selected_acc: None,
                full_acc: Some(*acc),
                trend: "-".into(),
            },
        );
    }
    for t in traces {
        let correct = t.gold.is_some_and(|g| g == t.final_label);
        match (t.stage, &t.chosen_tool) {
            (Stage::ConflictResolved, Some(tool)) => {
                let entry = report.tools.entry(tool.clone()).or_insert_with(|| ToolUsage {
                    level: levels.get(tool).cloned().unwrap_or_else(|| "-".into()),
                    selected_count: 0,
                    selected_correct: 0,
                    selected_acc: None,
                    full_acc: None,
                    trend: "-".into(),
                });
                entry.selected_count += 1;
                entry.selected_correct += usize::from(correct);
            }
            (Stage::FallbackDirect | Stage::FallbackMajority, _) => {
                report.failures += 1;
                report.failure_correct += usize::from(correct);
            }
            _ => {}
        }
    }
    let labeled = traces.iter().any(|t| t.gold.is_some());
    for usage in report.tools.values_mut() {
        if labeled {
            usage.selected_acc = ratio(usage.selected_correct as u64, usage.selected_count as u64);
        }
        usage.trend = match (usage.selected_acc, usage.full_acc) {
            (Some(s), Some(f)) if s > f => "up",
            (Some(s), Some(f)) if s < f => "down",
            (Some(_), Some(_)) => "same",
            _ => "-",
        }
        .into();
    }
    report
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

/// Plain-text tables: metrics, categories and tool usage.
pub fn render_tables(
    metrics: Option<&Metrics>,
    baselines: &BTreeMap<String, f64>,
    categories: &Categories,
    usage: &ToolUsageReport,
) -> String {
    let mut out = String::new();
    if let Some(m) = metrics {
        let _ = writeln!(out, "{:<24} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "method", "ACC", "ACC+", "ACC-", "F1+", "F1-", "MCC");
        let _ = writeln!(
            out,
            "{:<24} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8.4}",
            "armor",
            pct(m.acc_overall),
            pct(m.acc_feasible),
            pct(m.acc_infeasible),
            pct(m.f1_feasible),
            pct(m.f1_infeasible),
            m.mcc
        );
        for (name, acc) in baselines {
            let _ = writeln!(out, "{:<24} {:>8}", name, pct(Some(*acc)));
        }
        out.push('\n');
    }
    let _ = writeln!(out, "{:<12} {:>8} {:>10} {:>8}", "category", "count", "share(%)", "ACC");
    for (name, c) in [("T1-consistent", &categories.t1), ("Ts-consistent", &categories.ts), ("conflict", &categories.conflict)] {
        let _ = writeln!(out, "{:<12} {:>8} {:>10.2} {:>8}", name, c.count, c.proportion, pct(c.accuracy));
    }
    out.push('\n');
    let _ = writeln!(out, "{:<16} {:>6} {:>8} {:>8} {:>8} {:>6}", "tool", "level", "chosen", "ACCsel", "ACCall", "trend");
    for (tool, u) in &usage.tools {
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>8} {:>8} {:>8} {:>6}",
            tool,
            u.level,
            u.selected_count,
            pct(u.selected_acc),
            pct(u.full_acc),
            u.trend
        );
    }
    let _ = writeln!(out, "{:<16} {:>6} {:>8}", "failure", "-", usage.failures);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_digest: String,
    /// Artifact name to SHA-256.
    pub assets: BTreeMap<String, String>,
    pub backend: String,
}

/// Everything a prediction run produces. Contains no timestamps, so equal
/// inputs serialize to equal bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub ablation: Ablation,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    pub baselines: BTreeMap<String, f64>,
    pub categories: Categories,
    pub tool_usage: ToolUsageReport,
    pub provenance: Provenance,
    pub traces: Vec<DecisionTrace>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn render(&self) -> String {
        render_tables(self.metrics.as_ref(), &self.baselines, &self.categories, &self.tool_usage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Idx, Reaction, Split};
    use proptest::prelude::*;
    use Label::{Feasible as F, Infeasible as I};

    fn counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    #[test]
    fn confusion_examples() {
        assert_eq!(confusion_counts(vec![(F, F); 10]).unwrap(), counts(10, 0, 0, 0));
        assert_eq!(confusion_counts(vec![(F, I); 3]).unwrap(), counts(0, 0, 0, 3));
        let mixed = [(F, F), (F, I), (I, I), (I, F), (F, F), (I, I), (I, I), (F, I)];
        assert_eq!(confusion_counts(mixed).unwrap(), counts(2, 1, 3, 2));
        assert_eq!(confusion_counts(Vec::new()), Err(EvalError::EmptyInput));
    }

    #[test]
    fn accuracy_examples() {
        let a = accuracy_metrics(&counts(50, 0, 50, 0));
        assert_eq!((a.overall, a.feasible, a.infeasible), (Some(1.0), Some(1.0), Some(1.0)));
        let a = accuracy_metrics(&counts(0, 0, 50, 50));
        assert_eq!((a.overall, a.feasible, a.infeasible), (Some(0.5), Some(0.0), Some(1.0)));
        assert_eq!(accuracy_metrics(&counts(45, 10, 40, 5)).overall, Some(0.85));
        assert_eq!(accuracy_metrics(&counts(3, 0, 0, 0)).infeasible, None);
    }

    #[test]
    fn f1_examples() {
        let f = f1_per_class(&counts(50, 0, 50, 0));
        assert_eq!((f.feasible, f.infeasible), (Some(1.0), Some(1.0)));
        let f = f1_per_class(&counts(50, 50, 0, 0));
        assert!((f.feasible.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f.infeasible, None);
        let f = f1_per_class(&counts(45, 10, 40, 5));
        let (p, r) = (45.0 / 55.0, 45.0 / 50.0);
        assert!((f.feasible.unwrap() - 2.0 * p * r / (p + r)).abs() < 1e-15);
        assert!((f.feasible.unwrap() - 0.857142857).abs() < 1e-6);
    }

    #[test]
    fn mcc_examples() {
        assert_eq!(mcc(&counts(50, 0, 50, 0)), 1.0);
        assert_eq!(mcc(&counts(0, 50, 0, 50)), -1.0);
        let expected = (45.0 * 40.0 - 10.0 * 5.0) / ((55.0f64) * 50.0 * 50.0 * 45.0).sqrt();
        assert!((mcc(&counts(45, 10, 40, 5)) - expected).abs() < 1e-12);
        assert!((mcc(&counts(45, 10, 40, 5)) - 0.7035).abs() < 1e-4);
        assert_eq!(mcc(&counts(10, 0, 0, 0)), 0.0);
    }

    #[test]
    fn vote_examples() {
        use Prediction::*;
        assert_eq!(majority_vote(&[Pred1, Pred1, Pred0], None), F);
        assert_eq!(majority_vote(&[Pred1, Pred0], None), I);
        assert_eq!(majority_vote(&[Pred1, Pred0], Some(&[0.9, 0.6])), F);
        assert_eq!(majority_vote(&[NA, NA], None), I);
    }

    fn ds(labels: &[u8], cols: &[(&str, &[u8])]) -> Dataset {
        let rs = labels.iter().enumerate().map(|(i, l)| Reaction::new(i as Idx, "C", "O", Label::from_int(*l as i64))).collect();
        let mut d = Dataset::new(Split::Test, rs).unwrap();
        for (t, ps) in cols {
            let col = ps
                .iter()
                .enumerate()
                .map(|(i, p)| (i as Idx, match p { 0 => Prediction::Pred0, 1 => Prediction::Pred1, _ => Prediction::NA }))
                .collect();
            d.set_column(*t, col);
        }
        d
    }

    #[test]
    fn upper_bound_examples() {
        let d = ds(&[1, 0, 1, 0], &[("a", &[1, 1, 0, 9]), ("b", &[0, 0, 0, 1]), ("c", &[0, 1, 1, 1])]);
        // a right on 0; b right on 1; c right on 2; nobody on 3.
        assert_eq!(oracle_upper_bound(&d).unwrap(), 0.75);
        let single = ds(&[1, 0, 1, 0], &[("a", &[1, 1, 0, 0])]);
        assert_eq!(oracle_upper_bound(&single).unwrap(), crate::tools::tool_accuracy("a", &single).unwrap());
    }

    fn trace(stage: Stage, gold: Label, fin: Label, chosen: Option<&str>) -> DecisionTrace {
        DecisionTrace {
            idx: 0,
            stage,
            selected_tools: vec![],
            chosen_tool: chosen.map(String::from),
            demonstrations_used: 0,
            final_label: fin,
            gold: Some(gold),
            diagnostics: vec![],
        }
    }

    #[test]
    fn categories_partition() {
        let mut traces = vec![trace(Stage::T1Consensus, F, F, None); 72];
        traces.extend(vec![trace(Stage::TsConsensus, F, I, None); 10]);
        traces.extend(vec![trace(Stage::ConflictResolved, F, F, Some("a")); 9]);
        traces.extend(vec![trace(Stage::FallbackMajority, F, I, None); 9]);
        let c = category_breakdown(&traces);
        assert_eq!((c.t1.count, c.ts.count, c.conflict.count), (72, 10, 18));
        assert!((c.t1.proportion + c.ts.proportion + c.conflict.proportion - 100.0).abs() < 1e-9);
        assert_eq!((c.t1.accuracy, c.ts.accuracy, c.conflict.accuracy), (Some(1.0), Some(0.0), Some(0.5)));
    }

    #[test]
    fn usage_counts() {
        let mut traces = vec![trace(Stage::ConflictResolved, F, F, Some("a")); 3];
        traces.push(trace(Stage::ConflictResolved, F, I, Some("a")));
        traces.push(trace(Stage::FallbackDirect, F, I, None));
        let full = BTreeMap::from([("a".to_string(), 0.9), ("b".to_string(), 0.5)]);
        let u = tool_usage_report(&traces, &full, &BTreeMap::new());
        assert_eq!(u.tools["a"].selected_count, 4);
        assert_eq!(u.tools["a"].selected_acc, Some(0.75));
        assert_eq!(u.tools["a"].trend, "down");
        assert_eq!((u.tools["b"].selected_count, u.tools["b"].selected_acc), (0, None));
        assert_eq!(u.failures, 1);
    }

    fn arb_counts() -> impl Strategy<Value = ConfusionCounts> {
        (0u64..500, 0u64..500, 0u64..500, 0u64..500).prop_map(|(tp, fp, tn, fn_)| counts(tp, fp, tn, fn_))
    }

    proptest! {
        #[test]
        fn mcc_swap_symmetric_and_bounded(c in arb_counts()) {
            prop_assert!((mcc(&c) - mcc(&c.swapped())).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&mcc(&c)));
        }

        #[test]
        fn overall_is_class_weighted_mean(c in arb_counts()) {
            prop_assume!(c.tp + c.fn_ > 0 && c.tn + c.fp > 0);
            let a = accuracy_metrics(&c);
            let pos = (c.tp + c.fn_) as f64;
            let neg = (c.tn + c.fp) as f64;
            let mean = (a.feasible.unwrap() * pos + a.infeasible.unwrap() * neg) / (pos + neg);
            prop_assert!((a.overall.unwrap() - mean).abs() < 1e-12);
        }

        #[test]
        fn vote_is_permutation_invariant(ps in proptest::collection::vec(0u8..3, 1..12), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let preds: Vec<Prediction> = ps.iter().map(|p| match p { 0 => Prediction::Pred0, 1 => Prediction::Pred1, _ => Prediction::NA }).collect();
            let mut shuffled = preds.clone();
            shuffled.shuffle(&mut crate::util::keyed_rng(&[&seed.to_le_bytes()]));
            prop_assert_eq!(majority_vote(&preds, None), majority_vote(&shuffled, None));
        }
    }
}

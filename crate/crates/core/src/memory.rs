//! Tool-conflict memory: contrastive instances with LLM rationales, stored on
//! disk and retrieved by fingerprint similarity.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chem::{top_k_similar, Fingerprinter, IndexError, SimilarityIndex};
use crate::domain::{Dataset, Idx, Prediction, Reaction, ToolId};
use crate::llm::{bindings, Bindings, Schema, TemplateId};
use crate::patterns::{select_tools, CoverageJudge, Pattern};
use crate::util::keyed_rng;

/// Most negatives per instance, matching the elimination schema.
pub const MAX_NEGATIVES: usize = 3;
pub const DEFAULT_K: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Elimination {
    pub tool: ToolId,
    pub why_not: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rationale {
    pub tool: ToolId,
    pub evidence: Vec<String>,
    pub elimination: Vec<Elimination>,
    pub final_reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveInstance {
    pub idx: Idx,
    pub reactants: String,
    pub product: String,
    pub pos_tool: ToolId,
    pub pos_pattern_id: String,
    pub neg_tools: Vec<ToolId>,
    pub neg_pattern_ids: Vec<String>,
    pub rationale: Rationale,
}

impl ContrastiveInstance {
    /// Structural invariants that hold without the dataset.
    pub fn check(&self) -> Result<(), String> {
        if self.neg_tools.is_empty() || self.neg_tools.len() > MAX_NEGATIVES {
            return Err(format!("{} negatives", self.neg_tools.len()));
        }
        if self.neg_tools.len() != self.neg_pattern_ids.len() {
            return Err("negative tools and patterns differ in length".into());
        }
        if self.neg_tools.contains(&self.pos_tool) {
            return Err("trusted tool listed as negative".into());
        }
        if self.rationale.tool != self.pos_tool {
            return Err(format!("rationale trusts {} not {}", self.rationale.tool, self.pos_tool));
        }
        if self.rationale.evidence.is_empty() {
            return Err("empty evidence".into());
        }
        if let Some(e) = self.rationale.elimination.iter().find(|e| !self.neg_tools.contains(&e.tool)) {
            return Err(format!("elimination names non-negative {}", e.tool));
        }
        Ok(())
    }

    /// Label-dependent invariants.
    pub fn check_labels(&self, dataset: &Dataset) -> Result<(), String> {
        let label = dataset.label(self.idx).ok_or_else(|| format!("{} unlabeled", self.idx))?;
        if !dataset.prediction(&self.pos_tool, self.idx).is_correct(label) {
            return Err(format!("{} is not correct on {}", self.pos_tool, self.idx));
        }
        if let Some(t) = self.neg_tools.iter().find(|t| dataset.prediction(t, self.idx).is_correct(label)) {
            return Err(format!("negative {t} is correct on {}", self.idx));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MemoryError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("fingerprint sidecar does not match instances: {0}")]
    SidecarMismatch(String),
}

#[derive(Debug, Clone, Default)]
pub struct ConflictMemory {
    instances: BTreeMap<Idx, Vec<ContrastiveInstance>>,
    index: SimilarityIndex,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BuildReport {
    pub reactions_considered: usize,
    pub reactions_stored: usize,
    pub instances: usize,
    pub skipped_no_pair: usize,
    pub skipped_invalid: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub loaded: usize,
    pub dropped: usize,
}

/// One candidate line shared by the memory and selection prompts.
#[derive(Debug, Clone, Serialize)]
pub struct CandidateView<'a> {
    pub tool: &'a str,
    pub tool_prediction: Prediction,
    pub rule_name: &'a str,
    pub rule_explanation: &'a str,
    pub conf: f64,
}

impl<'a> CandidateView<'a> {
    pub fn new(tool: &'a str, prediction: Prediction, pattern: &'a Pattern) -> Self {
        let conf = (pattern.conf.unwrap_or(0.0) * 1e4).round() / 1e4;
        Self { tool, tool_prediction: prediction, rule_name: &pattern.name, rule_explanation: &pattern.explanation, conf }
    }
}

/// The `{cands_section}` block: a heading and a JSON array of candidates.
pub fn cands_section(cands: &[CandidateView]) -> String {
    format!(
        "Candidate tools and their matched rules (JSON):\n{}",
        serde_json::to_string_pretty(cands).expect("candidates serialize")
    )
}

fn memory_bindings(r: &Reaction, cands: &[CandidateView], gold: &str, negs: &[ToolId]) -> Bindings {
    bindings([
        ("reactants", r.reactants.clone()),
        ("product", r.product.clone()),
        ("cands_section", cands_section(cands)),
        ("gold_tool", gold.to_string()),
        ("neg_tools_json", serde_json::to_string(negs).expect("ids serialize")),
        ("neg_str", negs.join(", ")),
    ])
}

fn build_for_reaction(
    r: &Reaction,
    dataset: &Dataset,
    finals: &[Pattern],
    judge: &CoverageJudge,
    val_accuracy: &BTreeMap<ToolId, f64>,
) -> Result<Vec<ContrastiveInstance>, ()> {
    let label = r.label.ok_or(())?;
    let matched = select_tools(r, finals, usize::MAX, judge, val_accuracy);
    let (pos, neg): (Vec<_>, Vec<_>) =
        matched.iter().partition(|(t, _)| dataset.prediction(t, r.idx).is_correct(label));
    let neg: Vec<_> = neg.into_iter().take(MAX_NEGATIVES).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(());
    }
    let neg_tools: Vec<ToolId> = neg.iter().map(|(t, _)| t.clone()).collect();
    let mut out = Vec::new();
    for (gold, gold_pattern) in &pos {
        // Candidates in ranking order, restricted to this pair set.
        let cands: Vec<CandidateView> = matched
            .iter()
            .filter(|(t, _)| t == gold || neg_tools.contains(t))
            .map(|(t, p)| CandidateView::new(t, dataset.prediction(t, r.idx), p))
            .collect();
        let schema = Schema::MemoryBuild { gold_tool: gold.clone(), neg_tools: neg_tools.clone() };
        match judge.client.ask(TemplateId::MemoryBuild, memory_bindings(r, &cands, gold, &neg_tools), &schema) {
            Ok(v) => match serde_json::from_value::<Rationale>(v) {
                Ok(rationale) => out.push(ContrastiveInstance {
                    idx: r.idx,
                    reactants: r.reactants.clone(),
                    product: r.product.clone(),
                    pos_tool: gold.clone(),
                    pos_pattern_id: gold_pattern.pattern_id.clone(),
                    neg_tools: neg_tools.clone(),
                    neg_pattern_ids: neg.iter().map(|(_, p)| p.pattern_id.clone()).collect(),
                    rationale,
                }),
                Err(e) => log::warn!("rationale for {} on {} unreadable: {e}", gold, r.idx),
            },
            Err(e) => log::warn!("rationale for {} on {} skipped: {e}", gold, r.idx),
        }
    }
    Ok(out)
}

impl ConflictMemory {
    /// Builds instances over `pool`. Each correct tool with a covering Final
    /// pattern is contrasted with up to three incorrect covered tools.
    pub fn build(
        pool: &BTreeSet<Idx>,
        finals: &[Pattern],
        dataset: &Dataset,
        judge: &CoverageJudge,
        val_accuracy: &BTreeMap<ToolId, f64>,
        fingerprinter: &Fingerprinter,
    ) -> Result<(Self, BuildReport), MemoryError> {
        let reactions: Vec<&Reaction> = pool.iter().filter_map(|&i| dataset.get(i)).collect();
        let results: Vec<_> = reactions
            .par_iter()
            .map(|r| (*r, build_for_reaction(r, dataset, finals, judge, val_accuracy)))
            .collect();

        let mut report = BuildReport { reactions_considered: reactions.len(), ..Default::default() };
        let mut memory = Self { instances: BTreeMap::new(), index: SimilarityIndex::new(fingerprinter.width) };
        for (r, result) in results {
            match result {
                Err(()) => report.skipped_no_pair += 1,
                Ok(list) if list.is_empty() => report.skipped_invalid += 1,
                Ok(list) => {
                    let fp = match fingerprinter.fingerprint(r) {
                        Ok(fp) => fp,
                        Err(e) => {
                            log::warn!("reaction {} has no fingerprint: {e}", r.idx);
                            report.skipped_invalid += 1;
                            continue;
                        }
                    };
                    memory.index.insert(r.idx, fp)?;
                    report.instances += list.len();
                    report.reactions_stored += 1;
                    memory.instances.insert(r.idx, list);
                }
            }
        }
        Ok((memory, report))
    }

    /// Builds from already validated instances, fingerprinting their reactions.
    pub fn from_instances(
        instances: impl IntoIterator<Item = ContrastiveInstance>,
        fingerprinter: &Fingerprinter,
    ) -> Result<(Self, LoadReport), MemoryError> {
        let mut memory = Self { instances: BTreeMap::new(), index: SimilarityIndex::new(fingerprinter.width) };
        let mut report = LoadReport::default();
        for inst in instances {
            if let Err(e) = inst.check() {
                log::warn!("instance on {} dropped: {e}", inst.idx);
                report.dropped += 1;
                continue;
            }
            if !memory.instances.contains_key(&inst.idx) {
                let r = Reaction::new(inst.idx, inst.reactants.clone(), inst.product.clone(), None);
                match fingerprinter.fingerprint(&r) {
                    Ok(fp) => memory.index.insert(inst.idx, fp)?,
                    Err(e) => {
                        log::warn!("instance on {} dropped: {e}", inst.idx);
                        report.dropped += 1;
                        continue;
                    }
                }
            }
            memory.instances.entry(inst.idx).or_default().push(inst);
            report.loaded += 1;
        }
        Ok((memory, report))
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Member reactions.
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn instance_count(&self) -> usize {
        self.instances.values().map(Vec::len).sum()
    }

    pub fn instances(&self) -> impl Iterator<Item = &ContrastiveInstance> {
        self.instances.values().flatten()
    }

    pub fn instances_for(&self, idx: Idx) -> &[ContrastiveInstance] {
        self.instances.get(&idx).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn index(&self) -> &SimilarityIndex {
        &self.index
    }

    /// Drops instances whose label-dependent invariants fail on `dataset`.
    pub fn retain_valid(&mut self, dataset: &Dataset) -> usize {
        let mut dropped = 0;
        for list in self.instances.values_mut() {
            let before = list.len();
            list.retain(|i| i.check_labels(dataset).is_ok());
            dropped += before - list.len();
        }
        let empty: Vec<Idx> = self.instances.iter().filter(|(_, l)| l.is_empty()).map(|(i, _)| *i).collect();
        if !empty.is_empty() {
            for i in &empty {
                self.instances.remove(i);
            }
            let width = self.index.width();
            let kept = self.index.entries().iter().filter(|(i, _)| !empty.contains(i)).cloned();
            self.index = SimilarityIndex::build(width, kept).expect("subset of a valid index");
        }
        dropped
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for inst in self.instances() {
            out.push_str(&serde_json::to_string(inst).expect("instance serializes"));
            out.push('\n');
        }
        out
    }

    /// Reads the memory file, re-validating every line. A present sidecar
    /// fingerprint file must list exactly the member reactions.
    pub fn load(path: &Path, sidecar: Option<&Path>, fingerprinter: &Fingerprinter) -> Result<(Self, LoadReport), MemoryError> {
        let text = fs::read_to_string(path).map_err(|source| MemoryError::Io { path: path.display().to_string(), source })?;
        let mut bad = 0;
        let mut parsed = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<ContrastiveInstance>(line) {
                Ok(inst) => parsed.push(inst),
                Err(e) => {
                    log::warn!("memory line {} dropped: {e}", i + 1);
                    bad += 1;
                }
            }
        }
        let (memory, mut report) = Self::from_instances(parsed, fingerprinter)?;
        report.dropped += bad;
        if let Some(sidecar) = sidecar.filter(|p| p.exists()) {
            let stored = crate::chem::load_fingerprints(sidecar)?;
            if stored.entries() != memory.index.entries() {
                return Err(MemoryError::SidecarMismatch(sidecar.display().to_string()));
            }
        }
        Ok((memory, report))
    }
}

/// For the `k` nearest member reactions, one instance each, chosen by an RNG
/// keyed on `(seed, query idx, member idx)`. Nearest first.
pub fn retrieve_demonstrations<'m>(
    memory: &'m ConflictMemory,
    r: &Reaction,
    k: usize,
    seed: u64,
    fingerprinter: &Fingerprinter,
) -> Vec<&'m ContrastiveInstance> {
    if memory.is_empty() {
        return Vec::new();
    }
    let Ok(fp) = fingerprinter.fingerprint(r) else {
        log::warn!("reaction {} has no fingerprint; no demonstrations", r.idx);
        return Vec::new();
    };
    let hits = match top_k_similar(&memory.index, &fp, k) {
        Ok(h) => h,
        Err(e) => {
            log::warn!("retrieval for {} failed: {e}", r.idx);
            return Vec::new();
        }
    };
    hits.into_iter()
        .filter_map(|(member, _)| {
            let list = memory.instances.get(&member)?;
            let mut rng = keyed_rng(&[&seed.to_le_bytes(), &r.idx.to_le_bytes(), &member.to_le_bytes()]);
            Some(&list[rng.gen_range(0..list.len())])
        })
        .collect()
}

//! Synthetic reaction universe with engineered tool strengths, and an oracle
//! scenario that answers every prompt truthfully from the templates.
//!
//! Each reaction attaches one functional-group motif (its region) to a carbon
//! chain using one counter-ion reagent (its family). Both are recoverable from
//! the SMILES text, so a scripted backend can judge rule coverage exactly.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::domain::{Dataset, Idx, Label, Prediction, Reaction, Split, ToolId};
use crate::llm::{LlmRequest, Scenario, TemplateId};
use crate::tools::write_prediction_table;
use crate::util::{atomic_write, keyed_rng};

/// `(name, product motif)`, checked in this order by [`region_of`].
pub const REGIONS: [(&str, &str); 10] = [
    ("Ester", "C(=O)OC"),
    ("Amide", "C(=O)NC"),
    ("Chlorination", "Cl"),
    ("Bromination", "Br"),
    ("Nitrile", "C#N"),
    ("Sulfonylation", "S(=O)(=O)C"),
    ("Azo", "N=N"),
    ("Nitration", "[N+](=O)[O-]"),
    ("Iodination", "I"),
    ("Fluorination", "F"),
];

pub const FAMILIES: [&str; 10] = ["[Li+]", "[Na+]", "[K+]", "[Mg+2]", "[Zn+2]", "[Cu+]", "[Pd]", "[Pt]", "[Fe+3]", "[Co+2]"];

const SCAFFOLDS: [&str; 6] = ["CC", "CCC", "CCCC", "CCCCC", "CCCCCC", "CCCCCCC"];

pub fn region_of(product: &str) -> Option<usize> {
    REGIONS.iter().position(|(_, motif)| product.contains(motif))
}

pub fn family_of(reactants: &str) -> Option<usize> {
    let reagent = reactants.rsplit_once('.')?.1;
    FAMILIES.iter().position(|f| *f == reagent)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub tools: usize,
    pub regions: usize,
    pub families: usize,
    pub size: usize,
    pub seed: u64,
    /// Probability that any single prediction is replaced by NA.
    pub noise: f64,
    pub generalist_acc: f64,
    pub strong_acc: f64,
    pub weak_acc: f64,
    /// Share of tools that are generalists, in percent.
    pub generalist_pct: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            tools: 13,
            regions: 6,
            families: 6,
            size: 2000,
            seed: 1,
            noise: 0.0,
            generalist_acc: 0.85,
            strong_acc: 0.95,
            weak_acc: 0.55,
            generalist_pct: 25.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    SpecInvalid(String),
    #[error("engineered accuracy not met: {0}")]
    Verification(String),
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::SpecInvalid(m));
        if !(2..=REGIONS.len()).contains(&self.regions) {
            return bad(format!("regions must be in 2..={}", REGIONS.len()));
        }
        if self.tools < 3 {
            return bad("tools must be at least 3".into());
        }
        if !(1..=FAMILIES.len()).contains(&self.families) {
            return bad(format!("families must be in 1..={}", FAMILIES.len()));
        }
        if self.size < 2 {
            return bad("size must be at least 2".into());
        }
        for (name, v) in [
            ("noise", self.noise),
            ("generalist_acc", self.generalist_acc),
            ("strong_acc", self.strong_acc),
            ("weak_acc", self.weak_acc),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1]"));
            }
        }
        if !(0.0..=100.0).contains(&self.generalist_pct) {
            return bad("generalist_pct must be in [0, 100]".into());
        }
        Ok(())
    }

    fn n_generalists(&self) -> usize {
        ((self.tools as f64 * self.generalist_pct / 100.0).floor() as usize).clamp(1, self.tools - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolProfile {
    pub tool_id: ToolId,
    pub kind: String,
    pub strong_regions: Vec<usize>,
    /// Assigned accuracy per region.
    pub nominal: Vec<f64>,
    /// Measured accuracy per split and region; NA counts as wrong.
    pub realized: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub idx: Idx,
    pub split: Split,
    pub region: usize,
    pub region_name: String,
    pub family: usize,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub validation: Dataset,
    pub test: Dataset,
    pub ground_truth: Vec<GroundTruth>,
    pub profiles: Vec<ToolProfile>,
}

enum Role {
    Generalist,
    Weak,
    /// Wrong inside this family first.
    Strong { family: usize },
}

fn key(seed: u64, tag: &str, parts: &[u64]) -> rand_chacha::ChaCha8Rng {
    let mut bytes: Vec<Vec<u8>> = vec![seed.to_le_bytes().to_vec(), tag.as_bytes().to_vec()];
    bytes.extend(parts.iter().map(|p| p.to_le_bytes().to_vec()));
    let refs: Vec<&[u8]> = bytes.iter().map(Vec::as_slice).collect();
    keyed_rng(&refs)
}

/// Generates the corpus and checks every engineered per-region accuracy
/// before returning.
pub fn synth_gen(spec: &SynthSpec) -> Result<SynthCorpus, SynthError> {
    spec.validate()?;
    let n_gen = spec.n_generalists();
    let tool_ids: Vec<ToolId> = (0..spec.tools)
        .map(|i| if i < n_gen { format!("g{:02}", i + 1) } else { format!("s{:02}", i - n_gen + 1) })
        .collect();
    let strong: Vec<Vec<usize>> = (0..spec.tools)
        .map(|i| {
            if i < n_gen {
                return vec![];
            }
            let j = i - n_gen;
            let mut r = vec![(2 * j) % spec.regions, (2 * j + 1) % spec.regions];
            r.dedup();
            r
        })
        .collect();
    // Per region: a trap family shared by all but the last strong specialist,
    // which instead is blind in the next family.
    let trap: Vec<usize> = (0..spec.regions).map(|g| key(spec.seed, "trap", &[g as u64]).gen_range(0..spec.families)).collect();
    let role = |tool: usize, region: usize| -> Role {
        if tool < n_gen {
            return Role::Generalist;
        }
        if !strong[tool].contains(&region) {
            return Role::Weak;
        }
        let holders: Vec<usize> = (n_gen..spec.tools).filter(|&t| strong[t].contains(&region)).collect();
        if holders.last() == Some(&tool) && holders.len() > 1 {
            Role::Strong { family: (trap[region] + 1) % spec.families }
        } else if holders.len() == 1 {
            Role::Strong { family: (trap[region] + 1) % spec.families }
        } else {
            Role::Strong { family: trap[region] }
        }
    };
    let nominal = |tool: usize, region: usize| match role(tool, region) {
        Role::Generalist => spec.generalist_acc,
        Role::Weak => spec.weak_acc,
        Role::Strong { .. } => spec.strong_acc,
    };

    let mut rng = key(spec.seed, "reactions", &[]);
    let mut reactions = Vec::with_capacity(spec.size);
    let mut truth = Vec::with_capacity(spec.size);
    let half = spec.size / 2;
    for idx in 0..spec.size as Idx {
        let region = rng.gen_range(0..spec.regions);
        let family = rng.gen_range(0..spec.families);
        let scaffold = SCAFFOLDS[rng.gen_range(0..SCAFFOLDS.len())];
        let label = if rng.gen_bool(0.5) { Label::Feasible } else { Label::Infeasible };
        let split = if (idx as usize) < half { Split::Validation } else { Split::Test };
        reactions.push(Reaction::new(
            idx,
            format!("{scaffold}.{}", FAMILIES[family]),
            format!("{scaffold}{}", REGIONS[region].1),
            Some(label),
        ));
        truth.push(GroundTruth { idx, split, region, region_name: REGIONS[region].0.to_string(), family });
    }

    let mut columns: Vec<BTreeMap<Idx, Prediction>> = vec![BTreeMap::new(); spec.tools];
    let mut expected: Vec<(usize, Split, usize, usize, usize)> = Vec::new();
    for (s_no, split) in [Split::Validation, Split::Test].into_iter().enumerate() {
        for region in 0..spec.regions {
            let members: Vec<&GroundTruth> = truth.iter().filter(|g| g.split == split && g.region == region).collect();
            let n = members.len();
            let mut hardness: Vec<Idx> = members.iter().map(|g| g.idx).collect();
            hardness.shuffle(&mut key(spec.seed, "hardness", &[s_no as u64, region as u64]));
            for tool in 0..spec.tools {
                let w = ((1.0 - nominal(tool, region)) * n as f64).round() as usize;
                let wrong: Vec<Idx> = match role(tool, region) {
                    Role::Generalist => {
                        let mut order = hardness.clone();
                        order.shuffle(&mut key(spec.seed, "generalist", &[s_no as u64, region as u64, tool as u64]));
                        order.into_iter().take(w).collect()
                    }
                    Role::Weak => hardness.iter().copied().take(w).collect(),
                    Role::Strong { family } => {
                        let fam = |i: &Idx| truth[*i as usize].family == family;
                        hardness.iter().copied().filter(fam).chain(hardness.iter().copied().filter(|i| !fam(i))).take(w).collect()
                    }
                };
                for g in &members {
                    let label = reactions[g.idx as usize].label.expect("synthetic reactions are labeled");
                    let p = if wrong.contains(&g.idx) { Prediction::from_label(label.flip()) } else { Prediction::from_label(label) };
                    columns[tool].insert(g.idx, p);
                }
                expected.push((tool, split, region, n, w));
            }
        }
    }
    if spec.noise > 0.0 {
        for (tool, col) in columns.iter_mut().enumerate() {
            for (idx, p) in col.iter_mut() {
                if key(spec.seed, "noise", &[tool as u64, *idx]).gen_bool(spec.noise) {
                    *p = Prediction::NA;
                }
            }
        }
    }

    // Measured accuracies, and the exact-count check when noise is off.
    let mut realized: Vec<BTreeMap<String, Vec<f64>>> = vec![BTreeMap::new(); spec.tools];
    for &(tool, split, region, n, w) in &expected {
        let correct = truth
            .iter()
            .filter(|g| g.split == split && g.region == region)
            .filter(|g| columns[tool][&g.idx].is_correct(reactions[g.idx as usize].label.unwrap()))
            .count();
        if spec.noise == 0.0 && correct != n - w {
            return Err(SynthError::Verification(format!(
                "{} in region {region} ({split:?}): {correct} correct, expected {}",
                tool_ids[tool],
                n - w
            )));
        }
        let acc = if n == 0 { nominal(tool, region) } else { correct as f64 / n as f64 };
        realized[tool].entry(split_name(split).to_string()).or_insert_with(|| vec![0.0; spec.regions])[region] = acc;
    }

    let split_off = |split: Split| -> Dataset {
        let rs: Vec<Reaction> = reactions.iter().zip(&truth).filter(|(_, g)| g.split == split).map(|(r, _)| r.clone()).collect();
        let mut ds = Dataset::new(split, rs).expect("idx are unique");
        for (tool, col) in tool_ids.iter().zip(&columns) {
            ds.set_column(tool.clone(), col.clone());
        }
        ds
    };
    let profiles = (0..spec.tools)
        .map(|t| ToolProfile {
            tool_id: tool_ids[t].clone(),
            kind: if t < n_gen { "generalist".into() } else { "specialist".into() },
            strong_regions: strong[t].clone(),
            nominal: (0..spec.regions).map(|g| nominal(t, g)).collect(),
            realized: realized[t].clone(),
        })
        .collect();
    Ok(SynthCorpus {
        spec: spec.clone(),
        validation: split_off(Split::Validation),
        test: split_off(Split::Test),
        ground_truth: truth,
        profiles,
    })
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Validation => "validation",
        Split::Test => "test",
        Split::Synthetic => "synthetic",
    }
}

impl SynthCorpus {
    pub fn tool_ids(&self) -> Vec<ToolId> {
        self.profiles.iter().map(|p| p.tool_id.clone()).collect()
    }

    /// Writes `validation.jsonl`, `test.jsonl`, `tables/<tool>.csv`,
    /// `ground_truth.jsonl` and `profiles.json` under `dir`.
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        let strip = |ds: &Dataset| {
            let mut d = ds.clone();
            d.predictions.clear();
            d.to_jsonl()
        };
        atomic_write(&dir.join("validation.jsonl"), strip(&self.validation).as_bytes())?;
        atomic_write(&dir.join("test.jsonl"), strip(&self.test).as_bytes())?;
        for tool in self.tool_ids() {
            let mut rows = self.validation.predictions[&tool].clone();
            rows.extend(self.test.predictions[&tool].iter().map(|(i, p)| (*i, *p)));
            atomic_write(&dir.join("tables").join(format!("{tool}.csv")), write_prediction_table(&rows).as_bytes())?;
        }
        let mut gt = String::new();
        for g in &self.ground_truth {
            gt.push_str(&serde_json::to_string(g).expect("ground truth serializes"));
            gt.push('\n');
        }
        atomic_write(&dir.join("ground_truth.jsonl"), gt.as_bytes())?;
        let profiles = json!({ "spec": self.spec, "tools": self.profiles });
        let mut text = serde_json::to_string_pretty(&profiles).expect("profiles serialize");
        text.push('\n');
        atomic_write(&dir.join("profiles.json"), text.as_bytes())
    }
}

/// Truthful answers derived from the motif and reagent encoded in each
/// reaction. Registered as `"oracle"`.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleScenario;

pub const ORACLE_SCENARIO_ID: &str = "oracle";

const MIN_REGION_MEMBERS: usize = 8;
const MIN_REGION_ACC: f64 = 0.8;

fn json_tail(section: &str) -> Option<Value> {
    let start = section.find('[')?;
    serde_json::from_str(section[start..].trim_end()).ok()
}

impl OracleScenario {
    fn extraction(dataset_text: &str) -> Value {
        let mut by_region: BTreeMap<usize, (usize, Vec<Idx>)> = BTreeMap::new();
        let (mut total, mut correct_all) = (0usize, 0usize);
        for line in dataset_text.lines().filter(|l| !l.trim().is_empty()) {
            let Ok(v) = serde_json::from_str::<Value>(line) else { continue };
            let Some(region) = v["product"].as_str().and_then(region_of) else { continue };
            let correct = Prediction::from_json(&v["prediction"]).map(|p| p.to_json()) == Some(v["label"].clone());
            let entry = by_region.entry(region).or_default();
            entry.0 += 1;
            total += 1;
            if correct {
                correct_all += 1;
                entry.1.push(v["idx"].as_u64().unwrap_or_default());
            }
        }
        let mut entries = Vec::new();
        for (region, (n, mut good)) in by_region {
            let acc = good.len() as f64 / n as f64;
            if n >= MIN_REGION_MEMBERS && acc >= MIN_REGION_ACC && good.len() >= 5 {
                good.sort_unstable();
                let (name, motif) = REGIONS[region];
                entries.push(json!({
                    "name": name,
                    "explanation": format!("Products carrying the {motif} group."),
                    "examples_idx": &good[..5],
                }));
            }
        }
        let acc = if total == 0 { 0.0 } else { correct_all as f64 / total as f64 };
        json!({ "tool_acc": format!("{acc:.2}"), "often_correct_on": entries })
    }

    fn tool_select(b: &BTreeMap<String, String>) -> Value {
        let cands = json_tail(&b["cands_section"]).unwrap_or(Value::Null);
        let demos = json_tail(&b["demos_section"]).unwrap_or(Value::Null);
        let cands = cands.as_array().cloned().unwrap_or_default();
        let here = (region_of(&b["product"]), family_of(&b["reactants"]));
        let mut score: Vec<f64> = vec![0.0; cands.len()];
        for d in demos.as_array().into_iter().flatten() {
            let there = (d["product"].as_str().and_then(region_of), d["reactants"].as_str().and_then(family_of));
            let w = if there == here {
                1.0
            } else if there.0 == here.0 {
                0.1
            } else {
                0.0
            };
            for (i, c) in cands.iter().enumerate() {
                let tool = &c["tool"];
                if d["trusted_tool"] == *tool {
                    score[i] += w;
                }
                if d["eliminated"].as_array().into_iter().flatten().any(|e| e["tool"] == *tool) {
                    score[i] -= w;
                }
            }
        }
        let best = (0..cands.len())
            .filter(|&i| !Prediction::from_json(&cands[i]["tool_prediction"]).unwrap_or_default().is_na())
            .min_by(|&a, &b| {
                score[b]
                    .total_cmp(&score[a])
                    .then(cands[b]["conf"].as_f64().unwrap_or(0.0).total_cmp(&cands[a]["conf"].as_f64().unwrap_or(0.0)))
                    .then(a.cmp(&b))
            });
        match best {
            Some(i) => json!({ "tool": cands[i]["tool"], "reason": "best supported by similar cases" }),
            None => json!({ "tool": "abstain", "reason": "no usable candidate" }),
        }
    }
}

impl Scenario for OracleScenario {
    fn respond(&self, request: &LlmRequest) -> Option<String> {
        let b = &request.bindings;
        let v = match request.template {
            TemplateId::PatternExtraction => Self::extraction(b.get("dataset_text")?),
            TemplateId::PatternMatch => {
                let rule: String = serde_json::from_str(b.get("rule_name")?).ok()?;
                let example: Value = serde_json::from_str(b.get("example_json")?).ok()?;
                let region = example["product"].as_str().and_then(region_of);
                let hit = region.is_some_and(|g| REGIONS[g].0 == rule);
                json!({ "belongs_to_rule": hit, "confidence": "high" })
            }
            TemplateId::Consolidation => json!({ "keep_index": 0 }),
            TemplateId::MemoryBuild => {
                let gold = b.get("gold_tool")?;
                let negs: Vec<String> = serde_json::from_str(b.get("neg_tools_json")?).ok()?;
                json!({
                    "tool": gold,
                    "evidence": [format!("{gold}'s rule covers this product and it predicted the label correctly.")],
                    "elimination": negs.iter().map(|t| json!({ "tool": t, "why_not": "predicted the wrong label here" })).collect::<Vec<_>>(),
                    "final_reason": format!("Trust {gold} for this motif with this reagent."),
                })
            }
            TemplateId::ToolSelect => Self::tool_select(b),
            TemplateId::DirectAsk => json!({ "prediction": 1 }),
        };
        Some(v.to_string())
    }
}

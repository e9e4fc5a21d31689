//! Canonical prompt bodies. The first five must stay byte-stable; golden
//! files pin them. `DIRECT_ASK` is the fallback question.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TemplateId {
    PatternExtraction,
    PatternMatch,
    Consolidation,
    MemoryBuild,
    ToolSelect,
    DirectAsk,
}

impl TemplateId {
    pub const ALL: [TemplateId; 6] = [
        TemplateId::PatternExtraction,
        TemplateId::PatternMatch,
        TemplateId::Consolidation,
        TemplateId::MemoryBuild,
        TemplateId::ToolSelect,
        TemplateId::DirectAsk,
    ];

    pub fn body(self) -> &'static str {
        match self {
            TemplateId::PatternExtraction => PATTERN_EXTRACTION,
            TemplateId::PatternMatch => PATTERN_MATCH,
            TemplateId::Consolidation => CONSOLIDATION,
            TemplateId::MemoryBuild => MEMORY_BUILD,
            TemplateId::ToolSelect => TOOL_SELECT,
            TemplateId::DirectAsk => DIRECT_ASK,
        }
    }

    /// Placeholder names, in order of first appearance.
    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateId::PatternExtraction => &["dataset_text"],
            TemplateId::PatternMatch => &["rule_name", "rule_explanation", "example_json"],
            TemplateId::Consolidation => &["n_rules", "rule_name", "candidates_json"],
            TemplateId::MemoryBuild => &["reactants", "product", "cands_section", "gold_tool", "neg_tools_json", "neg_str"],
            TemplateId::ToolSelect => {
                &["reactants", "product", "cands_section", "conf_hint", "tiebreak", "demos_section", "allowed_str"]
            }
            TemplateId::DirectAsk => &["reactants", "product"],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::PatternExtraction => "PatternExtraction",
            TemplateId::PatternMatch => "PatternMatch",
            TemplateId::Consolidation => "Consolidation",
            TemplateId::MemoryBuild => "MemoryBuild",
            TemplateId::ToolSelect => "ToolSelect",
            TemplateId::DirectAsk => "DirectAsk",
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Placeholder name → bound text.
pub type Bindings = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RenderError {
    #[error("unbound placeholder {{{0}}}")]
    UnboundPlaceholder(String),
}

/// Substitutes every `{name}` for a declared placeholder in one pass.
///
/// Bound values are inserted verbatim and never rescanned, so a value that
/// itself contains `{name}` is left alone. Braces that do not enclose a
/// declared placeholder (the JSON schemas in the bodies) are literal.
pub fn render_prompt(template: TemplateId, bindings: &Bindings) -> Result<String, RenderError> {
    let names = template.placeholders();
    if let Some(missing) = names.iter().find(|n| !bindings.contains_key(**n)) {
        return Err(RenderError::UnboundPlaceholder((*missing).to_string()));
    }
    let body = template.body();
    let mut out = String::with_capacity(body.len() + bindings.values().map(String::len).sum::<usize>());
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        let matched = tail.find('}').map(|close| &tail[..close]).filter(|name| names.contains(name));
        match matched {
            Some(name) => {
                out.push_str(&bindings[name]);
                rest = &tail[name.len() + 1..];
            }
            None => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Convenience for building bindings from string pairs.
pub fn bindings<K: Into<String>, V: Into<String>>(pairs: impl IntoIterator<Item = (K, V)>) -> Bindings {
    pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect()
}

pub(crate) const PATTERN_EXTRACTION: &str = r##"You are a careful chemistry scientist.
Follow the user's instructions exactly.
You must output ONLY valid JSON text.
Do not use markdown, code blocks, or any text outside the JSON object.

You will be given a single dataset file related to reaction feasibility prediction.

The file is in JSON Lines format, where each line corresponds to one chemical reaction.
Each reaction entry includes:
- idx: an integer identifier for referencing specific reactions;
- reactants: a SMILES string representing the reactant molecules;
- product: a SMILES string representing the reaction product;
- label: a ground-truth binary label indicating whether the reaction is feasible;
- prediction from a single tool, where the prediction may be 0, 1, or NA (missing).

Your task is to analyze predictions from the tool only and provide a concise, pattern-level summary of this tool's behavior.
Focus on recurring trends rather than exhaustive coverage.

You must complete the task in a single response.
Do NOT ask to split the task across messages.
Do NOT request scope confirmation.

Treat NA, None, or missing predictions as WRONG when computing ACC. Please compute exact ACC and extract representative indices programmatically.

Strict rules (must follow):
• Output valid JSON only. Do NOT use code blocks or markdown. Do NOT include any text outside the JSON object.

IMPORTANT PRACTICAL CONSTRAINTS:
• Report reaction patterns the tool is often CORRECT on
• Patterns should capture recurring reaction behaviors and be formulated as decision-relevant categories, such that a given reaction can be judged as either belonging to or not belonging to the pattern based on observable characteristics.

Output the following structure exactly as a single JSON object:

{
  "tool_acc": "xx.xx
  "often_correct_on": [
    {
      "name": "Short, human-readable, chemistry-level name.",
      "explanation": "Describe explicit, observable reaction characteristics (e.g., bond changes, functional groups appearing or disappearing, or structural motifs) that enable an LLM to make a YES/NO decision on whether a given reaction belongs to this pattern. Where possible, the explanation should specify both inclusion cues (what must be present) and exclusion cues (what would disqualify a reaction from the pattern).",
      "examples_idx": [0, 0, 0, 0, 0]
    }
  ]
}

Hard constraints:
• Reaction pattern names must be short and human-readable.
• Explanations may include chemical concepts, structural cues, or transformation characteristics, as long as it helps the model make a reliable yes/no decision about whether a given reaction belongs to the pattern. Explanations should prioritize decisiveness and discriminability over abstract or high-level chemical generalization.
• Each examples_idx must contain exactly 5 integers that appear as idx values in the dataset.

Analyze ONLY the dataset provided next. After completing the analysis, internally verify whether the generated reaction patterns and explanations can correctly classify the listed example reactions. If mismatches are found, refine the pattern definitions and explanations to resolve the inconsistencies. Perform this verification and refinement silently, and output ONLY the final, consolidated results that conform to the required output structure. Do NOT output intermediate versions, alternative drafts, or self-correction steps.

Dataset input:
{dataset_text}"##;

pub(crate) const PATTERN_MATCH: &str = r##"You are a careful chemistry reaction-rule evaluator.
Follow the user's instructions exactly.
You must output ONLY valid JSON (no markdown, no extra text).

You will be given ONE reaction rule with name, explanation, and an example.
Your task: for THIS rule ONLY, judge whether THIS example belongs to the rule.

Instructions:
- Judge this example independently.
- Do NOT assume the example is correct.
- Base judgment only on:
  (1) rule name,
  (2) rule explanation,
  (3) example reactants/product SMILES.
- When making the judgment, treat the rule explanation as the primary and authoritative criterion for deciding whether an example belongs to the rule; the rule name serves only as a high-level label.

Output exactly ONE JSON object with format:
{
  "name": <rule name>,
  "idx": <example_idx>,
  "belongs_to_rule": true/false,
  "confidence": "high"|"medium"|"low",
  "reason": "brief explanation (1-2 sentences)"
}

Output requirements:
- Output MUST be valid JSON.
- Output ONE JSON object only.
- Do NOT include any text outside the JSON object.
- Do NOT repeat the input examples verbatim.

Rule input:
{
  "name": {rule_name},
  "explanation": {rule_explanation}
}

Example:
{example_json}"##;

pub(crate) const CONSOLIDATION: &str = r##"You are a careful chemistry scientist.
Follow the user's instructions exactly.
You must output ONLY valid JSON text.
Do not use markdown, code blocks, or any text outside the JSON object.

You are given {n_rules} reaction-pattern rules that all share the same name: "{rule_name}".

These rules describe the same concept but were written separately with slightly different wording.
Your task is to keep exactly ONE best rule and remove all others.

Criteria for the rule to keep:
- Most precise and complete chemistry description
- Clearest language

You MUST remove all rules except the best one. Do NOT keep more than one.

Return ONLY valid JSON (no extra text) in this exact schema:
{
  "keep_index": <integer>,
  "reason": "<1-2 sentences>"
}

Here are the candidates:
{candidates_json}"##;

pub(crate) const MEMORY_BUILD: &str = r##"You are a careful chemistry scientist.
Follow the user's instructions exactly.
You must output ONLY valid JSON text.
Do not use markdown, code blocks, or any text outside the JSON object.

We are constructing a demonstration for tool selection.

Reaction (SMILES):
- reactants: {reactants}
- product: {product}

{cands_section}

In this demonstration, there is EXACTLY ONE trusted tool:
- trusted tool MUST be: "{gold_tool}"
- the following tools are NOT trusted in this demonstration: {neg_tools_json}

Your job:
Write a concise and stable reasoning trace explaining WHY "{gold_tool}" is chosen over the non-trusted tools.
Base the reasoning primarily on the transformation implied by reactants→product and the rule explanations.
The tool_prediction field can be noisy; do NOT decide purely by majority vote.

Return ONLY valid JSON with this exact schema:
{
  "tool": "{gold_tool}",
  "evidence": ["<2-4 bullet points tied to the transformation and specific explanations>"],
  "elimination": [{"tool": "<non_trusted_tool>", "why_not": "<1 sentence>"} ... up to 3 items],
  "final_reason": "<1-2 sentences summary>"
}

Constraints:
- "tool" must be exactly "{gold_tool}".
- "elimination" tools must be selected from the non-trusted tools provided above and must be among: [{neg_str}].
- Do NOT mention the words: feasible, label, ground truth, training."##;

pub(crate) const TOOL_SELECT: &str = r##"You are a careful chemistry scientist.
Follow the user's instructions exactly.
You must output ONLY valid JSON text.
Do not use markdown, code blocks, or any text outside the JSON object.

You are given a chemical reaction:
- reactants (SMILES): {reactants}
- product (SMILES): {product}

{cands_section}

Selection principles:
- Choose the tool whose matched rule best explains the actual chemical transformation.
- Prefer more specific and chemically plausible rule explanations over vague/generic ones.
{conf_hint}{tiebreak}- If multiple candidates match well, consider internal consistency across rules.
- Output "abstain" only if no candidate provides a convincing match.
{demos_section}
Return ONLY valid JSON in this exact schema:
{
  "tool": <one of [{allowed_str}]>,
  "reason": "<1-3 sentences>"
}"##;

pub(crate) const DIRECT_ASK: &str = r##"You are a careful chemistry scientist.
Follow the user's instructions exactly.
You must output ONLY valid JSON text.
Do not use markdown, code blocks, or any text outside the JSON object.

Decide whether the following chemical reaction is feasible, i.e., whether the reactants can plausibly yield the product under reasonable conditions.

Reaction (SMILES):
- reactants: {reactants}
- product: {product}

Return ONLY valid JSON in this exact schema:
{
  "prediction": <1 if feasible, 0 if infeasible>,
  "reason": "<1-2 sentences>"
}"##;

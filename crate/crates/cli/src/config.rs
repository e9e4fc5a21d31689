use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use armor::pipeline::Config;
use armor::synth::SynthSpec;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssetPaths {
    /// Base for every relative path below; itself relative to the config file.
    pub dir: PathBuf,
    pub validation: PathBuf,
    pub test: PathBuf,
    /// One `<tool>.csv` or `<tool>.jsonl` per tool. Ignored when `tools` is set.
    pub tables_dir: PathBuf,
    /// Optional JSON list of tool records with explicit providers.
    pub tools: Option<PathBuf>,
    pub hierarchy: PathBuf,
    pub patterns_raw: PathBuf,
    pub patterns_refined: PathBuf,
    pub patterns_final: PathBuf,
    pub memory: PathBuf,
    pub memory_fingerprints: PathBuf,
    pub coverage_cache: PathBuf,
    pub report: PathBuf,
    pub evaluation: PathBuf,
    pub report_text: PathBuf,
}

impl Default for AssetPaths {
    fn default() -> Self {
        Self {
            dir: ".".into(),
            validation: "data/validation.jsonl".into(),
            test: "data/test.jsonl".into(),
            tables_dir: "data/tables".into(),
            tools: None,
            hierarchy: "hierarchy.json".into(),
            patterns_raw: "patterns_raw.json".into(),
            patterns_refined: "patterns_refined.json".into(),
            patterns_final: "patterns_final.json".into(),
            memory: "memory.jsonl".into(),
            memory_fingerprints: "memory_fingerprints.txt".into(),
            coverage_cache: "coverage_cache.jsonl".into(),
            report: "report.json".into(),
            evaluation: "evaluation.json".into(),
            report_text: "report.txt".into(),
        }
    }
}

impl AssetPaths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSettings {
    /// `scripted` or `remote`.
    pub backend: String,
    /// Scenario id for the scripted backend; `oracle` is built in.
    pub scenario: String,
    /// JSONL scenario table registered under `scenario`.
    pub scenario_file: Option<PathBuf>,
    /// Append every exchange to this scenario file.
    pub record_to: Option<PathBuf>,
    pub max_response_chars: usize,
    pub model: Option<String>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            backend: "scripted".into(),
            scenario: armor::synth::ORACLE_SCENARIO_ID.into(),
            scenario_file: None,
            record_to: None,
            max_response_chars: armor::llm::DEFAULT_MAX_RESPONSE_CHARS,
            model: None,
            timeout_secs: 30,
            max_in_flight: 8,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub assets: AssetPaths,
    pub llm: LlmSettings,
    pub pipeline: Config,
    pub synth: SynthSpec,
}

/// Parses a `--set` value as a TOML literal, falling back to a bare string.
fn literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for p in parents {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    table.insert(last.to_string(), literal(raw.trim()));
    Ok(())
}

/// Loads `path` (or defaults when absent), applies overrides and anchors the
/// asset directory at the config file's directory.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<CliConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut cfg: CliConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    if let Some(base) = path.and_then(Path::parent) {
        if cfg.assets.dir.is_relative() {
            cfg.assets.dir = base.join(&cfg.assets.dir);
        }
    }
    cfg.pipeline.validate().map_err(CliError::Config)?;
    Ok(cfg)
}

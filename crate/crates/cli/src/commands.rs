use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use armor::chem::write_fingerprints;
use armor::domain::{load_dataset, Dataset, DatasetError, PredictionMap, Split};
use armor::eval::{self, RunReport};
use armor::llm::{
    LlmBackend, LlmClient, LlmStatsSnapshot, RecordingBackend, RemoteBackend, RemoteConfig, ScenarioRegistry,
    ScriptedBackend, TableScenario,
};
use armor::memory::ConflictMemory;
use armor::patterns::{CoverageCache, CoverageJudge, PatternStore};
use armor::pipeline::{self, Assets, Hierarchy};
use armor::synth::{synth_gen, OracleScenario, ORACLE_SCENARIO_ID};
use armor::tools::{ProviderBinding, ProviderContext, ToolRecord, ToolRegistry};
use armor::util::{atomic_write, sha256_hex};

use crate::config::CliConfig;
use crate::CliError;

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::AssetMissing(path.display().to_string()))
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    require(path)?;
    fs::read_to_string(path).map_err(|e| CliError::AssetMissing(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    atomic_write(path, text.as_bytes()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn dataset(path: &Path, split: Split) -> Result<Dataset, CliError> {
    require(path)?;
    load_dataset(path, split).map_err(|e| match e {
        DatasetError::Io { .. } => CliError::AssetMissing(e.to_string()),
        _ => CliError::Validation(format!("{}: {e}", path.display())),
    })
}

pub struct Session {
    pub cfg: CliConfig,
}

impl Session {
    fn path(&self, p: &Path) -> PathBuf {
        self.cfg.assets.resolve(p)
    }

    fn client(&self) -> Result<LlmClient, CliError> {
        let s = &self.cfg.llm;
        let backend: Arc<dyn LlmBackend> = match s.backend.as_str() {
            "scripted" => {
                let mut registry = ScenarioRegistry::new();
                registry.register(ORACLE_SCENARIO_ID, Arc::new(OracleScenario));
                if let Some(file) = &s.scenario_file {
                    let file = self.path(file);
                    require(&file)?;
                    let table = TableScenario::load(&file).map_err(|e| CliError::Validation(format!("{}: {e}", file.display())))?;
                    registry.register(s.scenario.clone(), Arc::new(table));
                }
                if !registry.contains(&s.scenario) {
                    return Err(CliError::Config(format!("unknown scenario `{}`", s.scenario)));
                }
                Arc::new(ScriptedBackend::new(Arc::new(registry), s.scenario.clone()))
            }
            "remote" => {
                let mut rc = RemoteConfig::from_env().map_err(|e| CliError::Backend(e.to_string()))?;
                rc.model = s.model.clone();
                rc.timeout = Duration::from_secs(s.timeout_secs);
                rc.max_in_flight = s.max_in_flight.max(1);
                Arc::new(RemoteBackend::new(rc))
            }
            other => return Err(CliError::Config(format!("unknown llm backend `{other}`"))),
        };
        let backend = match &s.record_to {
            Some(p) => Arc::new(RecordingBackend::create(backend, &self.path(p)).map_err(|e| CliError::Io(e.to_string()))?),
            None => backend,
        };
        Ok(LlmClient::new(backend).with_max_response_chars(s.max_response_chars))
    }

    /// Every request of the stage failed: the backend is unusable.
    fn check_backend(stats: LlmStatsSnapshot) -> Result<(), CliError> {
        let requests = stats.calls - stats.repairs;
        if stats.failures > 0 && stats.failures >= requests {
            return Err(CliError::Backend(format!("all {requests} LLM requests failed")));
        }
        Ok(())
    }

    fn registry(&self, client: Option<&LlmClient>, inline: &PredictionMap) -> Result<ToolRegistry, CliError> {
        let a = &self.cfg.assets;
        let ctx = ProviderContext {
            llm: client.cloned(),
            http_timeout: Some(Duration::from_secs(self.cfg.llm.timeout_secs)),
            inline: inline.clone(),
            ..Default::default()
        };
        let records: Vec<ToolRecord> = if let Some(tools) = &a.tools {
            let path = self.path(tools);
            let mut records: Vec<ToolRecord> =
                serde_json::from_str(&read(&path)?).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            for r in &mut records {
                if let ProviderBinding::Table { path } = &mut r.provider {
                    *path = self.path(path);
                }
            }
            records
        } else if self.path(&a.tables_dir).is_dir() {
            let mut paths: Vec<PathBuf> = fs::read_dir(self.path(&a.tables_dir))
                .map_err(|e| CliError::Io(e.to_string()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| matches!(p.extension().and_then(|x| x.to_str()), Some("csv" | "jsonl" | "json")))
                .collect();
            paths.sort();
            paths
                .into_iter()
                .map(|p| {
                    let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                    ToolRecord::new(id, ProviderBinding::Table { path: p })
                })
                .collect()
        } else if !inline.is_empty() {
            return Ok(ToolRegistry::from_columns(inline));
        } else {
            return Err(CliError::AssetMissing(format!("no tools: neither {} nor inline columns", a.tables_dir.display())));
        };
        ToolRegistry::from_records(records, &ctx).map_err(|e| CliError::Validation(e.to_string()))
    }

    /// Validation split with every tool's predictions attached.
    fn validation(&self, client: Option<&LlmClient>) -> Result<Dataset, CliError> {
        let mut val = dataset(&self.path(&self.cfg.assets.validation), Split::Validation)?;
        let registry = self.registry(client, &val.predictions)?;
        let (columns, diags) = registry.prediction_columns(&val);
        if !diags.is_empty() {
            log::warn!("{} tool failures on validation became NA", diags.len());
        }
        for (t, col) in columns {
            val.set_column(t, col);
        }
        if !val.is_labeled() {
            return Err(CliError::Validation("validation split must be fully labeled".into()));
        }
        Ok(val)
    }

    fn hierarchy(&self) -> Result<Hierarchy, CliError> {
        let path = self.path(&self.cfg.assets.hierarchy);
        serde_json::from_str(&read(&path)?).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    fn store(&self, p: &Path) -> Result<PatternStore, CliError> {
        let path = self.path(p);
        require(&path)?;
        PatternStore::load(&path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    fn cache(&self) -> Result<CoverageCache, CliError> {
        let path = self.path(&self.cfg.assets.coverage_cache);
        CoverageCache::load(&path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    fn save_cache(&self, cache: &CoverageCache) -> Result<(), CliError> {
        write(&self.path(&self.cfg.assets.coverage_cache), &cache.to_jsonl())
    }

    fn llm_counters(client: &LlmClient, cache: Option<&CoverageCache>) -> Value {
        let s = client.stats();
        let mut v = json!({ "llm_calls": s.calls, "llm_repairs": s.repairs, "llm_failures": s.failures });
        if let Some(c) = cache {
            v["cache_hits"] = json!(c.hits());
            v["cache_misses"] = json!(c.misses());
        }
        v
    }

    pub fn synth_gen(&self, out: Option<PathBuf>) -> Result<Value, CliError> {
        let corpus = synth_gen(&self.cfg.synth).map_err(|e| match e {
            armor::synth::SynthError::SpecInvalid(m) => CliError::Config(m),
            other => CliError::Validation(other.to_string()),
        })?;
        let out = match out {
            Some(o) => o,
            None => self.path(&self.cfg.assets.validation).parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        corpus.write(&out).map_err(|e| CliError::Io(e.to_string()))?;
        Ok(json!({
            "out": out.display().to_string(),
            "validation": corpus.validation.len(),
            "test": corpus.test.len(),
            "tools": corpus.profiles.len(),
            "regions": self.cfg.synth.regions,
        }))
    }

    pub fn build_hierarchy(&self) -> Result<Value, CliError> {
        let val = self.validation(None)?;
        let tools: Vec<_> = val.tool_ids().cloned().collect();
        let h = pipeline::build_hierarchy(&tools, &val, self.cfg.pipeline.rho).map_err(|e| CliError::Validation(e.to_string()))?;
        let mut text = serde_json::to_string_pretty(&h).expect("hierarchy serializes");
        text.push('\n');
        write(&self.path(&self.cfg.assets.hierarchy), &text)?;
        Ok(json!({ "tools": tools.len(), "l1": h.l1, "l2": h.l2.len() }))
    }

    pub fn extract_patterns(&self) -> Result<Value, CliError> {
        let h = self.hierarchy()?;
        let client = self.client()?;
        let val = self.validation(Some(&client))?;
        let (store, stats) =
            pipeline::extract_stage(&val, &h, &self.cfg.pipeline, &client).map_err(|e| CliError::Validation(e.to_string()))?;
        Self::check_backend(client.stats())?;
        write(&self.path(&self.cfg.assets.patterns_raw), &store.to_json())?;
        let mut v = serde_json::to_value(&stats).expect("stats serialize");
        merge(&mut v, Self::llm_counters(&client, None));
        Ok(v)
    }

    pub fn refine(&self) -> Result<Value, CliError> {
        let raw = self.store(&self.cfg.assets.patterns_raw)?;
        let client = self.client()?;
        let val = self.validation(Some(&client))?;
        let cache = self.cache()?;
        let before = raw.len();
        let refined = pipeline::refine_stage(raw, &val, &self.cfg.pipeline, &CoverageJudge::new(&client, &cache));
        Self::check_backend(client.stats())?;
        write(&self.path(&self.cfg.assets.patterns_refined), &refined.to_json())?;
        self.save_cache(&cache)?;
        let mut v = json!({ "raw": before, "kept": refined.len(), "dropped": before - refined.len() });
        merge(&mut v, Self::llm_counters(&client, Some(&cache)));
        Ok(v)
    }

    pub fn consolidate(&self) -> Result<Value, CliError> {
        let refined = self.store(&self.cfg.assets.patterns_refined)?;
        let h = self.hierarchy()?;
        let client = self.client()?;
        let val = self.validation(Some(&client))?;
        let cache = self.cache()?;
        let before = refined.len();
        let (finals, merged, fallbacks) =
            pipeline::consolidate_stage(refined, &val, &h, &self.cfg.pipeline, &CoverageJudge::new(&client, &cache))
                .map_err(|e| CliError::Validation(e.to_string()))?;
        Self::check_backend(client.stats())?;
        write(&self.path(&self.cfg.assets.patterns_final), &finals.to_json())?;
        self.save_cache(&cache)?;
        let mut v = json!({ "refined": before, "final": finals.len(), "groups_merged": merged, "fallbacks": fallbacks });
        merge(&mut v, Self::llm_counters(&client, Some(&cache)));
        Ok(v)
    }

    pub fn build_memory(&self) -> Result<Value, CliError> {
        let finals = self.store(&self.cfg.assets.patterns_final)?;
        let h = self.hierarchy()?;
        let client = self.client()?;
        let val = self.validation(Some(&client))?;
        let cache = self.cache()?;
        let (memory, report) =
            pipeline::build_memory(&finals, &val, &h, &self.cfg.pipeline, &CoverageJudge::new(&client, &cache))
                .map_err(|e| CliError::Validation(e.to_string()))?;
        Self::check_backend(client.stats())?;
        write(&self.path(&self.cfg.assets.memory), &memory.to_jsonl())?;
        write(&self.path(&self.cfg.assets.memory_fingerprints), &write_fingerprints(memory.index()))?;
        self.save_cache(&cache)?;
        let mut v = serde_json::to_value(&report).expect("report serializes");
        merge(&mut v, Self::llm_counters(&client, Some(&cache)));
        Ok(v)
    }

    pub fn predict(&self) -> Result<Value, CliError> {
        let a = &self.cfg.assets;
        let h = self.hierarchy()?;
        let finals = self.store(&a.patterns_final)?;
        let mem_path = self.path(&a.memory);
        require(&mem_path)?;
        let client = self.client()?;
        let test = dataset(&self.path(&a.test), Split::Test)?;
        let registry = self.registry(Some(&client), &test.predictions)?;
        let (mut memory, load) = ConflictMemory::load(&mem_path, Some(&self.path(&a.memory_fingerprints)), &self.cfg.pipeline.fingerprint)
            .map_err(|e| CliError::Validation(e.to_string()))?;
        if self.path(&a.validation).exists() {
            let val = self.validation(Some(&client))?;
            let removed = memory.retain_valid(&val);
            if removed > 0 {
                log::warn!("{removed} memory instances disagree with validation labels and were dropped");
            }
        }
        let cache = self.cache()?;
        let mut digests = BTreeMap::new();
        for (name, p) in [("hierarchy", &a.hierarchy), ("patterns_final", &a.patterns_final), ("memory", &a.memory), ("test", &a.test)] {
            let bytes = fs::read(self.path(p)).map_err(|e| CliError::AssetMissing(e.to_string()))?;
            digests.insert(name.to_string(), sha256_hex(&bytes));
        }
        let assets = Assets {
            config: self.cfg.pipeline.clone(),
            hierarchy: h,
            finals: finals.into_patterns(),
            memory,
            registry,
            client: client.clone(),
            cache,
            asset_digests: digests,
        };
        let report = assets.run(&test);
        Self::check_backend(client.stats())?;
        write(&self.path(&a.report), &report.to_json())?;
        self.save_cache(&assets.cache)?;
        let mut v = json!({
            "ablation": report.ablation,
            "n": report.n,
            "memory_loaded": load.loaded,
            "memory_dropped": load.dropped,
            "acc": report.metrics.as_ref().and_then(|m| m.acc_overall),
            "t1": report.categories.t1.count,
            "ts": report.categories.ts.count,
            "conflict": report.categories.conflict.count,
        });
        merge(&mut v, Self::llm_counters(&client, Some(&assets.cache)));
        Ok(v)
    }

    fn report(&self) -> Result<RunReport, CliError> {
        let path = self.path(&self.cfg.assets.report);
        serde_json::from_str(&read(&path)?).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    /// Recomputes metrics from the stored traces against the test labels.
    pub fn evaluate(&self) -> Result<Value, CliError> {
        let report = self.report()?;
        let test = dataset(&self.path(&self.cfg.assets.test), Split::Test)?;
        let mut pairs = Vec::new();
        for t in &report.traces {
            let gold = test
                .label(t.idx)
                .ok_or_else(|| CliError::Validation(format!("trace {} has no labeled test reaction", t.idx)))?;
            pairs.push((gold, t.final_label));
        }
        if pairs.len() != test.len() {
            return Err(CliError::Validation(format!("{} traces for {} test reactions", pairs.len(), test.len())));
        }
        let metrics = eval::Metrics::from_pairs(pairs).map_err(|e| CliError::Validation(e.to_string()))?;
        let categories = eval::category_breakdown(&report.traces);
        let evaluation = json!({
            "ablation": report.ablation,
            "metrics": metrics,
            "baselines": report.baselines,
            "categories": categories,
            "tool_usage": report.tool_usage,
            "provenance": report.provenance,
        });
        let mut text = serde_json::to_string_pretty(&evaluation).expect("evaluation serializes");
        text.push('\n');
        write(&self.path(&self.cfg.assets.evaluation), &text)?;
        Ok(json!({ "n": report.n, "acc": metrics.acc_overall, "mcc": metrics.mcc }))
    }

    /// Renders the tables to stdout and `report_text`.
    pub fn render(&self) -> Result<String, CliError> {
        let report = self.report()?;
        let text = report.render();
        write(&self.path(&self.cfg.assets.report_text), &text)?;
        Ok(text)
    }
}

fn merge(into: &mut Value, from: Value) {
    if let (Some(a), Value::Object(b)) = (into.as_object_mut(), from) {
        a.extend(b);
    }
}

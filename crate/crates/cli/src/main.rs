//! `armor`: runs the offline stages and batch prediction over file assets.

mod commands;
mod config;

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    AssetMissing(String),
    #[error("{0}")]
    Backend(String),
    #[error("{0}")]
    Validation(String),
    #[error("asset directory is locked: {0}")]
    Locked(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn code(&self) -> (&'static str, u8) {
        match self {
            CliError::Config(_) => ("ConfigError", 2),
            CliError::Locked(_) => ("Locked", 2),
            CliError::AssetMissing(_) | CliError::Io(_) => ("AssetMissing", 3),
            CliError::Backend(_) => ("BackendFailure", 4),
            CliError::Validation(_) => ("ValidationFailure", 5),
        }
    }
}

#[derive(Parser)]
#[command(name = "armor", version, about = "Reaction feasibility by orchestrating prediction tools")]
struct Cli {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set pipeline.seed=2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate a synthetic corpus with prediction tables.
    SynthGen {
        #[arg(long)]
        tools: Option<usize>,
        #[arg(long)]
        regions: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        noise: Option<f64>,
        /// Output directory; defaults to the validation file's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    BuildHierarchy,
    ExtractPatterns,
    Refine,
    Consolidate,
    BuildMemory,
    Predict,
    Evaluate,
    Report,
}

/// Exclusive per-directory lock, released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        let path = dir.join(".armor.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(path.display().to_string())),
            Err(e) => Err(CliError::Io(e.to_string())),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = config::load(cli.config.as_deref(), &cli.overrides)?;
    if let Verb::SynthGen { tools, regions, size, seed, noise, .. } = &cli.verb {
        let s = &mut cfg.synth;
        s.tools = tools.unwrap_or(s.tools);
        s.regions = regions.unwrap_or(s.regions);
        s.size = size.unwrap_or(s.size);
        s.seed = seed.unwrap_or(s.seed);
        s.noise = noise.unwrap_or(s.noise);
    }
    let _lock = DirLock::acquire(&cfg.assets.dir)?;
    let session = commands::Session { cfg };
    let (name, counters) = match cli.verb {
        Verb::SynthGen { out, .. } => ("synth-gen", session.synth_gen(out)?),
        Verb::BuildHierarchy => ("build-hierarchy", session.build_hierarchy()?),
        Verb::ExtractPatterns => ("extract-patterns", session.extract_patterns()?),
        Verb::Refine => ("refine", session.refine()?),
        Verb::Consolidate => ("consolidate", session.consolidate()?),
        Verb::BuildMemory => ("build-memory", session.build_memory()?),
        Verb::Predict => ("predict", session.predict()?),
        Verb::Evaluate => ("evaluate", session.evaluate()?),
        Verb::Report => {
            print!("{}", session.render()?);
            return Ok(());
        }
    };
    log::info!("{name}: {counters}");
    println!("{}", json!({ "stage": name, "counters": counters }));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (name, code) = e.code();
            eprintln!("{}", json!({ "error": name, "code": code, "message": e.to_string() }));
            ExitCode::from(code)
        }
    }
}

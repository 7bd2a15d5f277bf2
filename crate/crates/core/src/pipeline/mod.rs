//! Stage orchestration over a run directory with a digest manifest.

pub mod config;
mod stages;
pub mod tables;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use config::{load_config, parse_config, Backend, BridgeConfig, BridgeReference, EvalConfig, RunConfig, SimConfig};

use crate::error::{Error, Result};
use crate::fsutil;

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StageName {
    Pool,
    Boundaries,
    Identities,
    Variations,
    PersonalizeEmit,
    Ingest,
    Filter,
    Eval,
}

impl StageName {
    /// Canonical execution order.
    pub const ALL: [StageName; 8] = [
        StageName::Pool,
        StageName::Boundaries,
        StageName::Identities,
        StageName::Variations,
        StageName::PersonalizeEmit,
        StageName::Ingest,
        StageName::Filter,
        StageName::Eval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Pool => "pool",
            StageName::Boundaries => "boundaries",
            StageName::Identities => "identities",
            StageName::Variations => "variations",
            StageName::PersonalizeEmit => "personalize-emit",
            StageName::Ingest => "ingest",
            StageName::Filter => "filter",
            StageName::Eval => "eval",
        }
    }

    /// Subdirectory of the run directory holding this stage's outputs.
    pub fn dir_name(self) -> &'static str {
        match self {
            StageName::PersonalizeEmit => "personalize",
            other => other.as_str(),
        }
    }

    pub fn dependencies(self) -> &'static [StageName] {
        use StageName::*;
        match self {
            Pool => &[],
            Boundaries => &[Pool],
            Identities => &[Pool, Boundaries],
            Variations => &[Identities, Boundaries],
            PersonalizeEmit => &[Variations],
            Ingest => &[PersonalizeEmit, Variations, Identities],
            Filter => &[Ingest],
            Eval => &[Filter, Ingest],
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        StageName::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<_> = StageName::ALL.iter().map(|s| s.as_str()).collect();
                Error::config(format!("unknown stage `{s}`; expected one of {}", known.join(", ")))
            })
    }
}

/// Parses a comma-separated stage list.
pub fn parse_stages(list: &str) -> Result<Vec<StageName>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(StageName::from_str)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: String,
    /// Path (relative to the run directory, or absolute for external files)
    /// to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub backend: Backend,
    pub stages: Vec<StageEntry>,
}

impl RunManifest {
    pub fn stage(&self, stage: StageName) -> Option<&StageEntry> {
        self.stages.iter().find(|e| e.stage == stage.as_str())
    }
}

/// Exclusive writer lock on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<RunLock> {
        let path = run_dir.join(LOCK_FILE);
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Dependency(format!(
                "run directory {} is locked by another writer (remove {} if stale)",
                run_dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExecuteOptions {
    pub stages: Option<Vec<StageName>>,
    pub seed_override: Option<u64>,
    pub t_ip: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecuteSummary {
    pub run_dir: PathBuf,
    pub executed: Vec<StageName>,
    pub skipped: Vec<StageName>,
}

fn rel(path: &Path, root: &Path) -> String {
    let p = path.strip_prefix(root).unwrap_or(path);
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if entry.file_type().map_err(|e| Error::io(&path, e))?.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// SHA-256 of every file under `path` (or of `path` itself), keyed by path.
fn digest_tree(path: &Path, root: Option<&Path>) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    if path.is_dir() {
        collect_files(path, &mut files)?;
    } else {
        tables::require_file(path)?;
        files.push(path.to_path_buf());
    }
    files
        .into_iter()
        .map(|f| {
            let key = match root {
                Some(r) => rel(&f, r),
                None => f.to_string_lossy().into_owned(),
            };
            Ok((key, fsutil::sha256_file(&f)?))
        })
        .collect()
}

fn verify(entry: &StageEntry, run_dir: &Path) -> Result<bool> {
    for (path, digest) in &entry.outputs {
        let p = run_dir.join(path);
        if !p.is_file() || fsutil::sha256_file(&p)? != *digest {
            return Ok(false);
        }
    }
    Ok(true)
}

/// `cfg` with command-line overrides applied, validated.
pub fn effective_config(mut cfg: RunConfig, opts: &ExecuteOptions) -> Result<RunConfig> {
    if let Some(seed) = opts.seed_override {
        cfg.seed = seed;
    }
    if let Some(t) = opts.t_ip {
        cfg.t_ip = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `runs/<first 12 hex digits of the config digest>`: a fresh directory per
/// distinct configuration.
pub fn default_run_dir(cfg: &RunConfig) -> PathBuf {
    let sha = fsutil::sha256_hex(&cfg.canonical_bytes());
    PathBuf::from("runs").join(&sha[..12])
}

/// Loads the config at `config_path`, applies overrides and executes.
pub fn execute(config_path: &Path, run_dir: &Path, opts: &ExecuteOptions) -> Result<ExecuteSummary> {
    let cfg = load_config(config_path)?;
    execute_config(cfg, run_dir, opts)
}

/// Runs the requested stages (all by default) in canonical order.
///
/// A stage whose recorded inputs and outputs still match is skipped. A run
/// directory only ever belongs to one configuration.
pub fn execute_config(cfg: RunConfig, run_dir: &Path, opts: &ExecuteOptions) -> Result<ExecuteSummary> {
    let cfg = effective_config(cfg, opts)?;
    let config_bytes = cfg.canonical_bytes();
    let config_sha = fsutil::sha256_hex(&config_bytes);

    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let _lock = RunLock::acquire(run_dir)?;

    let config_path = run_dir.join(CONFIG_FILE);
    if config_path.exists() {
        let existing = fsutil::sha256_file(&config_path)?;
        if existing != config_sha {
            return Err(Error::config(format!(
                "run directory {} belongs to a different configuration (sha256 {existing}); use a new run directory",
                run_dir.display()
            )));
        }
    } else {
        fsutil::write_atomic(&config_path, &config_bytes)?;
    }

    let manifest_path = run_dir.join(MANIFEST_FILE);
    let mut manifest = if manifest_path.exists() {
        fsutil::read_json::<RunManifest>(&manifest_path)?
    } else {
        RunManifest {
            tool: "latentforge".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: config_sha.clone(),
            seed: cfg.seed,
            backend: cfg.backend,
            stages: Vec::new(),
        }
    };

    let requested: Vec<StageName> = match &opts.stages {
        Some(list) => StageName::ALL.into_iter().filter(|s| list.contains(s)).collect(),
        None => StageName::ALL.to_vec(),
    };
    let ctx = stages::Ctx::new(&cfg, run_dir)?;
    let mut summary = ExecuteSummary {
        run_dir: run_dir.to_path_buf(),
        executed: Vec::new(),
        skipped: Vec::new(),
    };

    for stage in requested {
        let mut inputs = BTreeMap::new();
        inputs.insert(CONFIG_FILE.to_string(), config_sha.clone());
        for dep in stage.dependencies() {
            let entry = manifest.stage(*dep).ok_or_else(|| {
                Error::Dependency(format!("stage `{stage}` needs the outputs of stage `{dep}`; run `{dep}` first"))
            })?;
            if !verify(entry, run_dir)? {
                return Err(Error::data(format!(
                    "outputs of stage `{dep}` were modified after they were recorded; use a new run directory"
                )));
            }
            inputs.extend(entry.outputs.clone());
        }
        for ext in ctx.external_inputs(stage) {
            inputs.extend(digest_tree(&ext, None)?);
        }

        if let Some(entry) = manifest.stage(stage) {
            if entry.inputs == inputs && verify(entry, run_dir)? {
                log::info!("stage `{stage}` is up to date");
                summary.skipped.push(stage);
                continue;
            }
            return Err(Error::data(format!(
                "stage `{stage}` was recorded with different inputs or its outputs changed; use a new run directory"
            )));
        }

        let out_dir = run_dir.join(stage.dir_name());
        if out_dir.exists() {
            // leftovers of an interrupted attempt; nothing references them
            std::fs::remove_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        }
        log::info!("running stage `{stage}`");
        ctx.run(stage)?;
        let outputs = if out_dir.exists() {
            digest_tree(&out_dir, Some(run_dir))?
        } else {
            BTreeMap::new()
        };
        manifest.stages.push(StageEntry {
            stage: stage.as_str().to_string(),
            inputs,
            outputs,
        });
        manifest
            .stages
            .sort_by_key(|e| StageName::from_str(&e.stage).map(|s| s as usize).unwrap_or(usize::MAX));
        fsutil::write_json(&manifest_path, &manifest)?;
        summary.executed.push(stage);
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_roundtrip() {
        for s in StageName::ALL {
            assert_eq!(s.as_str().parse::<StageName>().unwrap(), s);
        }
        assert_eq!(
            parse_stages("eval, pool").unwrap(),
            vec![StageName::Eval, StageName::Pool]
        );
        assert!(matches!(parse_stages("pool,bogus"), Err(Error::Config(_))));
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(Error::Dependency(_))));
        drop(lock);
        RunLock::acquire(dir.path()).unwrap();
    }
}

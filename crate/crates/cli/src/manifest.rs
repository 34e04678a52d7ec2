//! `manifest.json`: config snapshot, seeds, hashes and per-stage outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub const FILE: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub outputs: Vec<String>,
    pub started: u64,
    pub finished: u64,
    pub runs: usize,
    /// The latest run reproduced the previous run's outputs byte for byte.
    pub reproduction: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub dataset_hash: Option<String>,
    pub checkpoint_hash: Option<String>,
    pub stages: BTreeMap<String, StageRecord>,
    /// Every file under the run directory (except this one) with its SHA-256.
    pub files: BTreeMap<String, String>,
}

pub fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(root, &p, out)?;
        } else if p.strip_prefix(root).map_or(false, |r| r != Path::new(FILE)) {
            out.push(p);
        }
    }
    Ok(())
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root)
        .unwrap_or(p)
        .to_string_lossy()
        .replace('\\', "/")
}

impl RunManifest {
    pub fn load(run: &Path) -> Result<RunManifest, CliError> {
        let path = run.join(FILE);
        if !path.exists() {
            return Ok(RunManifest::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
    }

    /// Records a finished stage and rescans the run directory.
    pub fn record(
        &mut self,
        run: &Path,
        stage: &str,
        cfg: &RunConfig,
        outputs: &[PathBuf],
        started: u64,
    ) -> Result<(), CliError> {
        self.config = cfg.snapshot();
        self.seeds = BTreeMap::from([
            ("data".to_string(), cfg.gen.seed),
            ("model".to_string(), cfg.model_seed),
            ("train".to_string(), cfg.train.seed),
            ("analysis".to_string(), cfg.analysis.seed),
            ("probe".to_string(), cfg.probe.seed),
        ]);
        let previous = self.files.clone();
        let mut files = Vec::new();
        walk(run, run, &mut files)?;
        self.files = files
            .iter()
            .map(|p| Ok((rel(run, p), sha256_file(p)?)))
            .collect::<Result<_, CliError>>()?;
        let outs: Vec<String> = outputs.iter().map(|p| rel(run, p)).collect();
        let reproduction = !outs.is_empty()
            && outs.iter().all(|o| {
                previous
                    .get(o)
                    .is_some_and(|h| self.files.get(o) == Some(h))
            });
        let entry = self.stages.entry(stage.to_string()).or_default();
        entry.runs += 1;
        entry.reproduction = entry.runs > 1 && reproduction;
        entry.outputs = outs;
        entry.started = started;
        entry.finished = now();
        self.dataset_hash = self.files.get(crate::stages::DATASET).cloned();
        self.checkpoint_hash = self.files.get(crate::stages::CHECKPOINT).cloned();
        let path = run.join(FILE);
        let text =
            serde_json::to_string_pretty(self).map_err(|e| CliError::Failed(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }
}

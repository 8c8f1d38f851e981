use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Corpus,
    AuxClassifier,
    Diffusion,
    Lora,
    Generate,
    Retrain,
    Evaluate,
    Oracle,
    Audit,
}

pub const STAGES: [Stage; 9] = [
    Stage::Corpus,
    Stage::AuxClassifier,
    Stage::Diffusion,
    Stage::Lora,
    Stage::Generate,
    Stage::Retrain,
    Stage::Evaluate,
    Stage::Oracle,
    Stage::Audit,
];

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::AuxClassifier => "aux_classifier",
            Stage::Diffusion => "diffusion",
            Stage::Lora => "lora",
            Stage::Generate => "generate",
            Stage::Retrain => "retrain",
            Stage::Evaluate => "evaluate",
            Stage::Oracle => "oracle",
            Stage::Audit => "audit",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        STAGES
            .iter()
            .find(|st| st.as_str() == s)
            .copied()
            .ok_or_else(|| Error::invalid("stage", format!("unknown stage {s:?}")))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Ran,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the experiment directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub stage: Stage,
    /// Names the (method, seed) cell that requested the stage.
    pub key: String,
    pub config_hash: String,
    /// Stage directory, relative to the experiment directory.
    pub dir: PathBuf,
    /// Config hashes of the upstream stages, by role.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<Artifact>,
    pub wall_time_s: f64,
    pub status: EntryStatus,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = File::open(path).ctx(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).ctx(|| format!("reading {}", path.display()))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Hash of a JSON value in canonical form (object keys sorted).
pub fn config_hash(value: &serde_json::Value) -> String {
    sha256_hex(serde_json::to_string(value).expect("JSON values serialize").as_bytes())
}

/// Append-only JSON-lines record of stage executions.
#[derive(Debug, Clone)]
pub struct RunLedger {
    path: PathBuf,
    root: PathBuf,
}

pub const LEDGER_FILE: &str = "ledger.jsonl";

impl RunLedger {
    pub fn open(experiment_dir: &Path) -> Result<Self> {
        fs::create_dir_all(experiment_dir).ctx(|| format!("creating {}", experiment_dir.display()))?;
        Ok(Self {
            path: experiment_dir.join(LEDGER_FILE),
            root: experiment_dir.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn entries(&self) -> Result<Vec<LedgerEntry>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let f = File::open(&self.path).ctx(|| format!("opening {}", self.path.display()))?;
        f.lock_shared().ctx(|| format!("locking {}", self.path.display()))?;
        let text = fs::read_to_string(&self.path).ctx(|| format!("reading {}", self.path.display()))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    path: self.path.clone(),
                    line: i + 1,
                    reason: e.to_string(),
                })
            })
            .collect()
    }

    pub fn append(&self, entry: &LedgerEntry) -> Result<()> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .ctx(|| format!("opening {}", self.path.display()))?;
        f.lock().ctx(|| format!("locking {}", self.path.display()))?;
        let mut line = serde_json::to_string(entry)?;
        line.push('\n');
        f.write_all(line.as_bytes()).ctx(|| format!("writing {}", self.path.display()))
    }

    /// The most recent executed entry for `hash` whose outputs are still on
    /// disk with matching contents.
    pub fn find(&self, hash: &str) -> Result<Option<LedgerEntry>> {
        for e in self.entries()?.into_iter().rev() {
            if e.status != EntryStatus::Ran || e.config_hash != hash {
                continue;
            }
            if self.outputs_intact(&e)? {
                return Ok(Some(e));
            }
        }
        Ok(None)
    }

    fn outputs_intact(&self, e: &LedgerEntry) -> Result<bool> {
        for a in &e.outputs {
            let p = self.root.join(&a.path);
            if !p.exists() || file_sha256(&p)? != a.sha256 {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn artifact(&self, path: &Path) -> Result<Artifact> {
        let rel = path.strip_prefix(&self.root).unwrap_or(path).to_path_buf();
        Ok(Artifact {
            sha256: file_sha256(&self.root.join(&rel))?,
            path: rel,
        })
    }
}

/// Leaf paths (dot-separated) where two JSON documents differ.
pub fn config_diff(a: &serde_json::Value, b: &serde_json::Value) -> Vec<String> {
    fn walk(a: &serde_json::Value, b: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
        use serde_json::Value::Object;
        match (a, b) {
            (Object(x), Object(y)) => {
                let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    match (x.get(k), y.get(k)) {
                        (Some(u), Some(v)) => walk(u, v, &p, out),
                        _ => out.push(p),
                    }
                }
            }
            _ if a != b => out.push(prefix.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(a, b, "", &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn diff_lists_changed_leaves() {
        let a = json!({"x": {"y": 1, "z": [1, 2]}, "w": "a"});
        let b = json!({"x": {"y": 2, "z": [1, 2]}, "w": "a", "v": 0});
        assert_eq!(config_diff(&a, &b), vec!["v".to_string(), "x.y".to_string()]);
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        assert_ne!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn ledger_round_trip_and_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let l = RunLedger::open(dir.path()).unwrap();
        let out = dir.path().join("a.txt");
        fs::write(&out, "hello").unwrap();
        let e = LedgerEntry {
            stage: Stage::Corpus,
            key: "corpus".into(),
            config_hash: "h".into(),
            dir: "corpus".into(),
            inputs: BTreeMap::new(),
            outputs: vec![l.artifact(&out).unwrap()],
            wall_time_s: 0.1,
            status: EntryStatus::Ran,
        };
        l.append(&e).unwrap();
        assert_eq!(l.entries().unwrap(), vec![e.clone()]);
        assert_eq!(l.find("h").unwrap(), Some(e));
        fs::write(&out, "changed").unwrap();
        assert_eq!(l.find("h").unwrap(), None);
    }
}

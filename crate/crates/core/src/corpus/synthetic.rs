//! Metadata table written next to generated tail images.
//!
//! `metadata.csv` columns: `class_id,seed,final_confidence,termination,steps_used,path`,
//! with `path` relative to the directory holding the table.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const METADATA_FILE: &str = "metadata.csv";
const COLUMNS: &str = "class_id,seed,final_confidence,termination,steps_used,path";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ThresholdMet,
    MaxSteps,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::ThresholdMet => "threshold_met",
            Termination::MaxSteps => "max_steps",
        })
    }
}

impl FromStr for Termination {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "threshold_met" => Ok(Termination::ThresholdMet),
            "max_steps" => Ok(Termination::MaxSteps),
            o => Err(format!("unknown termination {o:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRecord {
    pub class_id: usize,
    pub seed: u64,
    pub final_confidence: f64,
    pub termination: Termination,
    pub steps_used: usize,
    pub path: PathBuf,
}

/// Which generated images may enter a training manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InclusionPolicy {
    All,
    ThresholdMetOnly,
}

impl InclusionPolicy {
    pub fn admits(self, r: &SyntheticRecord) -> bool {
        match self {
            InclusionPolicy::All => true,
            InclusionPolicy::ThresholdMetOnly => r.termination == Termination::ThresholdMet,
        }
    }
}

pub fn write_metadata(dir: &Path, rows: &[SyntheticRecord]) -> Result<()> {
    let mut out = String::from(COLUMNS);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.class_id,
            r.seed,
            r.final_confidence,
            r.termination,
            r.steps_used,
            r.path.to_string_lossy()
        ));
    }
    fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
    let path = dir.join(METADATA_FILE);
    fs::write(&path, out).ctx(|| format!("writing {}", path.display()))
}

pub fn read_metadata(dir: &Path) -> Result<Vec<SyntheticRecord>> {
    let path = dir.join(METADATA_FILE);
    let text = fs::read_to_string(&path).ctx(|| format!("reading {}", path.display()))?;
    let perr = |line: usize, reason: String| Error::Parse {
        path: path.clone(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l == COLUMNS => {}
        _ => return Err(perr(1, format!("expected column line {COLUMNS:?}"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let ln = i + 1;
        let f: Vec<&str> = line.split(',').collect();
        let [class, seed, conf, term, steps, p] = f.as_slice() else {
            return Err(perr(ln, format!("expected 6 fields, got {}", f.len())));
        };
        rows.push(SyntheticRecord {
            class_id: class.parse().map_err(|e| perr(ln, format!("class_id: {e}")))?,
            seed: seed.parse().map_err(|e| perr(ln, format!("seed: {e}")))?,
            final_confidence: conf.parse().map_err(|e| perr(ln, format!("confidence: {e}")))?,
            termination: term.parse().map_err(|e| perr(ln, e))?,
            steps_used: steps.parse().map_err(|e| perr(ln, format!("steps_used: {e}")))?,
            path: PathBuf::from(p),
        });
    }
    Ok(rows)
}

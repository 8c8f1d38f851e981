use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// Column order of the report tables.
pub const REPORT_METRICS: [&str; 4] = ["fpr", "auc", "bacc_head", "bacc_tail"];
const METRIC_TITLES: [&str; 4] = ["FPR", "AUC", "bAcc-head", "bAcc-tail"];

/// One method's metrics for one seed, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub method: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: Option<f64>,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("aggregate", "no values"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() >= 2).then(|| {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        });
        Ok(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub n_seeds: usize,
    pub metrics: BTreeMap<String, MeanStd>,
    /// Set for rows carried without numbers, such as methods not implemented.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub score_name: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
}

/// Mean and sample std per method and metric, rows sorted by method name.
pub fn aggregate_seeds(rows: &[SeedMetrics]) -> Result<Vec<ReportRow>> {
    let mut by_method: BTreeMap<&str, Vec<&SeedMetrics>> = BTreeMap::new();
    for r in rows {
        by_method.entry(&r.method).or_default().push(r);
    }
    let mut out = Vec::new();
    for (method, group) in by_method {
        let keys: Vec<&String> = group[0].metrics.keys().collect();
        for g in &group[1..] {
            if g.metrics.keys().collect::<Vec<_>>() != keys {
                return Err(Error::invalid(
                    "aggregate",
                    format!("method {method}: seeds report different metric sets"),
                ));
            }
        }
        let mut metrics = BTreeMap::new();
        for k in keys {
            let values: Vec<f64> = group.iter().map(|g| g.metrics[k]).collect();
            metrics.insert(k.clone(), MeanStd::of(&values)?);
        }
        out.push(ReportRow {
            method: method.to_string(),
            n_seeds: group.len(),
            metrics,
            note: None,
        });
    }
    Ok(out)
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("# score,{}\n# seeds,", self.score_name);
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        s.push_str(&seeds.join(" "));
        s.push('\n');
        s.push_str("method,n_seeds");
        for m in REPORT_METRICS {
            let _ = write!(s, ",{m}_mean,{m}_std");
        }
        s.push_str(",note\n");
        for r in &self.rows {
            let _ = write!(s, "{},{}", r.method, r.n_seeds);
            for m in REPORT_METRICS {
                match r.metrics.get(m) {
                    Some(v) => {
                        let _ = write!(s, ",{}", v.mean);
                        match v.std {
                            Some(sd) => {
                                let _ = write!(s, ",{sd}");
                            }
                            None => s.push(','),
                        }
                    }
                    None => s.push_str(",,"),
                }
            }
            let _ = writeln!(s, ",{}", r.note.as_deref().unwrap_or(""));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, reason: &str| Error::Parse {
            path: "<report>".into(),
            line,
            reason: reason.to_string(),
        };
        let mut lines = text.lines().enumerate();
        let (_, l) = lines.next().ok_or_else(|| bad(1, "empty report"))?;
        let score_name = l.strip_prefix("# score,").ok_or_else(|| bad(1, "missing score line"))?.to_string();
        let (_, l) = lines.next().ok_or_else(|| bad(2, "missing seeds line"))?;
        let seeds = l
            .strip_prefix("# seeds,")
            .ok_or_else(|| bad(2, "missing seeds line"))?
            .split_whitespace()
            .map(|t| t.parse::<u64>().map_err(|_| bad(2, "bad seed")))
            .collect::<Result<Vec<_>>>()?;
        lines.next().ok_or_else(|| bad(3, "missing header"))?;
        let mut rows = Vec::new();
        for (i, l) in lines {
            if l.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 3 + 2 * REPORT_METRICS.len() {
                return Err(bad(i + 1, "wrong field count"));
            }
            let num = |t: &str| t.parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
            let mut metrics = BTreeMap::new();
            for (j, m) in REPORT_METRICS.iter().enumerate() {
                let (mean, std) = (f[2 + 2 * j], f[3 + 2 * j]);
                if mean.is_empty() {
                    continue;
                }
                let std = if std.is_empty() { None } else { Some(num(std)?) };
                metrics.insert(m.to_string(), MeanStd { mean: num(mean)?, std });
            }
            let note = f[f.len() - 1];
            rows.push(ReportRow {
                method: f[0].to_string(),
                n_seeds: f[1].parse().map_err(|_| bad(i + 1, "bad seed count"))?,
                metrics,
                note: (!note.is_empty()).then(|| note.to_string()),
            });
        }
        Ok(Self { score_name, seeds, rows })
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "Detection score: {}; seeds: {}\n\n| Method |",
            self.score_name,
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", ")
        );
        for t in METRIC_TITLES {
            let _ = write!(s, " {t} |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|".repeat(METRIC_TITLES.len()));
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "| {} |", r.method);
            for m in REPORT_METRICS {
                match (r.metrics.get(m), &r.note) {
                    (Some(v), _) => match v.std {
                        Some(sd) => {
                            let _ = write!(s, " {:.2} ± {:.2} |", v.mean, sd);
                        }
                        None => {
                            let _ = write!(s, " {:.2} |", v.mean);
                        }
                    },
                    (None, Some(note)) => {
                        let _ = write!(s, " {note} |");
                    }
                    (None, None) => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).ctx(|| format!("writing {}", csv.display()))?;
        let md = dir.join("report.md");
        std::fs::write(&md, self.to_markdown()).ctx(|| format!("writing {}", md.display()))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let csv = dir.join("report.csv");
        let text = std::fs::read_to_string(&csv).ctx(|| format!("reading {}", csv.display()))?;
        Self::from_csv(&text)
    }
}

/// Confusion counts as CSV with a header row of predicted class names.
pub fn confusion_csv(matrix: &[Vec<usize>], class_names: &[String]) -> String {
    let mut s = String::from("true\\pred");
    for n in class_names {
        let _ = write!(s, ",{n}");
    }
    s.push('\n');
    for (i, row) in matrix.iter().enumerate() {
        s.push_str(&class_names[i]);
        for c in row {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, seed: u64, fpr: f64) -> SeedMetrics {
        SeedMetrics {
            method: method.into(),
            seed,
            metrics: BTreeMap::from([("fpr".to_string(), fpr), ("auc".to_string(), 90.0)]),
        }
    }

    #[test]
    fn aggregate_examples() {
        let single = aggregate_seeds(&[row("a", 0, 12.5)]).unwrap();
        assert_eq!(single[0].metrics["fpr"], MeanStd { mean: 12.5, std: None });
        let two = aggregate_seeds(&[row("b", 0, 10.0), row("b", 1, 20.0)]).unwrap();
        let v = two[0].metrics["fpr"];
        assert_eq!(v.mean, 15.0);
        assert!((v.std.unwrap() - 50f64.sqrt()).abs() < 1e-12);
        let same = aggregate_seeds(&[row("c", 0, 3.0), row("c", 1, 3.0), row("c", 2, 3.0)]).unwrap();
        assert_eq!(same[0].metrics["fpr"].std, Some(0.0));
        let mut odd = row("d", 1, 1.0);
        odd.metrics.remove("auc");
        assert!(aggregate_seeds(&[row("d", 0, 1.0), odd]).is_err());
        let order = aggregate_seeds(&[row("z", 0, 1.0), row("a", 0, 1.0)]).unwrap();
        assert_eq!(order[0].method, "a");
    }

    #[test]
    fn csv_round_trip_preserves_markdown() {
        let mut rows = aggregate_seeds(&[row("ce", 0, 1.0 / 3.0), row("ce", 1, 0.1), row("x", 0, 2.0)]).unwrap();
        rows.push(ReportRow {
            method: "other".into(),
            n_seeds: 0,
            metrics: BTreeMap::new(),
            note: Some("not implemented".into()),
        });
        let report = EvalReport {
            score_name: "p_tail".into(),
            seeds: vec![0, 1],
            rows,
        };
        let back = EvalReport::from_csv(&report.to_csv()).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.to_markdown(), report.to_markdown());
    }
}

use std::fmt::Write as _;
use std::path::Path;

use super::logit::{energy_score, maxlogit_score, msp_score, p_tail_score, Side};
use super::mahalanobis::{mahalanobis_score, MahalanobisModel, MahalanobisVariant};
use crate::corpus::ClassTaxonomy;
use crate::error::{Error, IoContext, Result};

/// Per-sample OOD scores, stored column-wise. Larger always means more OOD.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub sample_ids: Vec<String>,
    pub is_tail: Vec<bool>,
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl ScoreTable {
    pub fn new(sample_ids: Vec<String>, is_tail: Vec<bool>) -> Result<Self> {
        if sample_ids.len() != is_tail.len() {
            return Err(Error::invalid("score table", "ids and labels differ in length"));
        }
        Ok(Self {
            sample_ids,
            is_tail,
            names: Vec::new(),
            columns: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn add(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::invalid("score column", format!("{name}: {} values for {} rows", values.len(), self.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("score column", format!("{name}: non-finite value")));
        }
        if name.contains(',') || self.names.iter().any(|n| n == name) {
            return Err(Error::invalid("score column", format!("bad or duplicate name {name}")));
        }
        self.names.push(name.to_string());
        self.columns.push(values);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| Error::invalid("score table", format!("no column {name}")))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,is_tail");
        for n in &self.names {
            let _ = write!(s, ",{n}");
        }
        s.push('\n');
        for i in 0..self.len() {
            let _ = write!(s, "{},{}", self.sample_ids[i], u8::from(self.is_tail[i]));
            for c in &self.columns {
                let _ = write!(s, ",{}", c[i]);
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, reason: &str| Error::Parse {
            path: "<scores>".into(),
            line,
            reason: reason.into(),
        };
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| bad(1, "empty"))?.split(',').collect();
        if header.len() < 2 || header[0] != "sample_id" || header[1] != "is_tail" {
            return Err(bad(1, "bad header"));
        }
        let mut ids = Vec::new();
        let mut tail = Vec::new();
        let mut cols = vec![Vec::new(); header.len() - 2];
        for (i, l) in lines.enumerate() {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != header.len() {
                return Err(bad(i + 2, "wrong field count"));
            }
            ids.push(f[0].to_string());
            tail.push(match f[1] {
                "1" => true,
                "0" => false,
                _ => return Err(bad(i + 2, "is_tail must be 0 or 1")),
            });
            for (c, v) in cols.iter_mut().zip(&f[2..]) {
                c.push(v.parse().map_err(|_| bad(i + 2, "bad number"))?);
            }
        }
        let mut t = Self::new(ids, tail)?;
        for (n, c) in header[2..].iter().zip(cols) {
            t.add(n, c)?;
        }
        Ok(t)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).ctx(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path).ctx(|| format!("reading {}", path.display()))?)
    }
}

/// Names of the full score zoo in table order.
pub const ZOO: [&str; 11] = [
    "msp_head",
    "msp_tail",
    "energy_head",
    "energy_tail",
    "maxlogit_head",
    "maxlogit_tail",
    "maha_head",
    "maha_tail",
    "maha_tail_minus_head",
    "rmaha_head",
    "p_tail",
];

/// Computes every score in [`ZOO`] from logits and penultimate features.
pub fn score_zoo(
    table: &mut ScoreTable,
    logits: &[Vec<f64>],
    features: &[Vec<f64>],
    taxonomy: &ClassTaxonomy,
    maha: &MahalanobisModel,
    temperature: f64,
) -> Result<()> {
    let head = taxonomy.head();
    let tail = taxonomy.tail();
    let per_logit = |f: &dyn Fn(&[f64]) -> Result<f64>| -> Result<Vec<f64>> { logits.iter().map(|z| f(z)).collect() };
    let per_feat = |v: MahalanobisVariant| -> Result<Vec<f64>> {
        features.iter().map(|x| mahalanobis_score(x, maha, v)).collect()
    };
    table.add("msp_head", per_logit(&|z| msp_score(z, &head, Side::Head))?)?;
    table.add("msp_tail", per_logit(&|z| msp_score(z, &tail, Side::Tail))?)?;
    table.add("energy_head", per_logit(&|z| energy_score(z, &head, temperature, Side::Head))?)?;
    table.add("energy_tail", per_logit(&|z| energy_score(z, &tail, temperature, Side::Tail))?)?;
    table.add("maxlogit_head", per_logit(&|z| maxlogit_score(z, &head, Side::Head))?)?;
    table.add("maxlogit_tail", per_logit(&|z| maxlogit_score(z, &tail, Side::Tail))?)?;
    table.add("maha_head", per_feat(MahalanobisVariant::ToHead)?)?;
    table.add("maha_tail", per_feat(MahalanobisVariant::ToTail)?)?;
    table.add("maha_tail_minus_head", per_feat(MahalanobisVariant::TailMinusHead)?)?;
    table.add("rmaha_head", per_feat(MahalanobisVariant::RelativeHead)?)?;
    table.add("p_tail", per_logit(&|z| p_tail_score(z, taxonomy))?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut t = ScoreTable::new(vec!["a".into(), "b".into()], vec![true, false]).unwrap();
        t.add("x", vec![0.1 + 0.2, -1e-300]).unwrap();
        t.add("y", vec![3.0, 4.5]).unwrap();
        assert!(t.add("y", vec![1.0, 1.0]).is_err());
        assert!(t.add("z", vec![f64::NAN, 1.0]).is_err());
        assert_eq!(ScoreTable::from_csv(&t.to_csv()).unwrap(), t);
    }
}

//! Dataset manifests.
//!
//! On disk a manifest is UTF-8 text: a `#`-prefixed header block carrying the
//! taxonomy and the per-split per-class counts, a column line, then one
//! comma-separated record per line. Record paths are relative to the
//! directory holding the manifest file.
//!
//! ```text
//! # logex-manifest v1
//! # class,0,head_0,head
//! # class,1,tail_0_blobs,tail
//! # pair,0,1
//! # count,train,0,natural,200
//! sample_id,path,class_id,split,origin
//! train_c00_00000,images/train/head_0/train_c00_00000.png,0,train,natural
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ClassTaxonomy;
use crate::error::{Error, IoContext, Result};

const MAGIC: &str = "# logex-manifest v1";
const COLUMNS: &str = "sample_id,path,class_id,split,origin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Natural,
    Synthetic,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Natural => "natural",
            Origin::Synthetic => "synthetic",
        }
    }
}

impl FromStr for Origin {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "natural" => Ok(Origin::Natural),
            "synthetic" => Ok(Origin::Synthetic),
            other => Err(format!("unknown origin {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Record {
    pub sample_id: String,
    /// Relative to [`DatasetManifest::base_dir`].
    pub path: PathBuf,
    pub class_id: usize,
    pub split: Split,
    pub origin: Origin,
}

/// Count key: `(split, class_id, origin)`.
pub type CountKey = (Split, usize, Origin);

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
    pub taxonomy: ClassTaxonomy,
    /// Directory record paths are resolved against. Not serialized; it is
    /// the manifest file's directory after [`DatasetManifest::read`].
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<Record>, taxonomy: ClassTaxonomy, base_dir: PathBuf) -> Result<Self> {
        let m = Self {
            records,
            taxonomy,
            base_dir,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.taxonomy.validate()?;
        let mut ids = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if r.sample_id.is_empty() || r.sample_id.contains([',', '\n']) {
                return Err(Error::invalid("manifest", format!("bad sample id {:?}", r.sample_id)));
            }
            if !ids.insert(r.sample_id.as_str()) {
                return Err(Error::invalid(
                    "manifest",
                    format!("duplicate sample id {}", r.sample_id),
                ));
            }
            if r.class_id >= self.taxonomy.n_classes() {
                return Err(Error::invalid(
                    "manifest",
                    format!("{} has unknown class id {}", r.sample_id, r.class_id),
                ));
            }
            if r.split == Split::Test && r.origin == Origin::Synthetic {
                return Err(Error::invalid(
                    "manifest",
                    format!("synthetic record {} in test split", r.sample_id),
                ));
            }
            if r.path.to_string_lossy().contains([',', '\n']) {
                return Err(Error::invalid("manifest", format!("bad path {:?}", r.path)));
            }
        }
        Ok(())
    }

    pub fn counts(&self) -> BTreeMap<CountKey, usize> {
        let mut c = BTreeMap::new();
        for r in &self.records {
            *c.entry((r.split, r.class_id, r.origin)).or_insert(0) += 1;
        }
        c
    }

    /// Number of records in `split` for `class_id`, both origins.
    pub fn count(&self, split: Split, class_id: usize) -> usize {
        self.records
            .iter()
            .filter(|r| r.split == split && r.class_id == class_id)
            .count()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_records(&self, split: Split) -> Vec<Record> {
        self.split(split).cloned().collect()
    }

    /// Train-split counts per class, indexed by class id.
    pub fn train_class_counts(&self) -> Vec<usize> {
        (0..self.taxonomy.n_classes())
            .map(|c| self.count(Split::Train, c))
            .collect()
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        self.base_dir.join(&record.path)
    }

    /// Keeps only records matching `keep`.
    pub fn filtered(&self, keep: impl Fn(&Record) -> bool) -> DatasetManifest {
        DatasetManifest {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            taxonomy: self.taxonomy.clone(),
            base_dir: self.base_dir.clone(),
        }
    }

    /// Re-expresses record paths relative to `new_base`.
    pub fn rebased(&self, new_base: &Path) -> Result<DatasetManifest> {
        let new_base = normalize(new_base)?;
        let old_base = normalize(&self.base_dir)?;
        let records = self
            .records
            .iter()
            .map(|r| {
                let abs = lexical_join(&old_base, &r.path);
                Ok(Record {
                    path: relative_path(&new_base, &abs),
                    ..r.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DatasetManifest {
            records,
            taxonomy: self.taxonomy.clone(),
            base_dir: new_base,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for (id, name) in self.taxonomy.class_names.iter().enumerate() {
            let part = if self.taxonomy.is_tail(id) { "tail" } else { "head" };
            out.push_str(&format!("# class,{id},{name},{part}\n"));
        }
        for (h, t) in &self.taxonomy.similarity_pairs {
            out.push_str(&format!("# pair,{h},{t}\n"));
        }
        for ((split, class, origin), n) in self.counts() {
            out.push_str(&format!("# count,{split},{class},{},{n}\n", origin.as_str()));
        }
        out.push_str(COLUMNS);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.sample_id,
                path_to_string(&r.path),
                r.class_id,
                r.split,
                r.origin.as_str()
            ));
        }
        out
    }

    /// Writes the manifest to `path`, rebasing record paths onto its directory.
    pub fn write(&self, path: &Path) -> Result<DatasetManifest> {
        self.validate()?;
        let dir = path.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
        let rebased = self.rebased(dir)?;
        fs::write(path, rebased.to_text()).ctx(|| format!("writing {}", path.display()))?;
        Ok(rebased)
    }

    pub fn read(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path).ctx(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, path, base)
    }

    pub fn parse(text: &str, source: &Path, base_dir: PathBuf) -> Result<DatasetManifest> {
        let perr = |line: usize, reason: String| Error::Parse {
            path: source.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim_end() == MAGIC => {}
            _ => return Err(perr(1, format!("expected {MAGIC:?}"))),
        }
        let mut classes: Vec<(usize, String, bool)> = Vec::new();
        let mut pairs = Vec::new();
        let mut header_counts = BTreeMap::new();
        let mut records = Vec::new();
        let mut seen_columns = false;
        for (i, line) in lines {
            let ln = i + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# ") {
                if seen_columns {
                    return Err(perr(ln, "header line after records".into()));
                }
                let f: Vec<&str> = rest.split(',').collect();
                match f.as_slice() {
                    ["class", id, name, part] => {
                        let id = id.parse().map_err(|e| perr(ln, format!("class id: {e}")))?;
                        let tail = match *part {
                            "head" => false,
                            "tail" => true,
                            p => return Err(perr(ln, format!("bad partition {p:?}"))),
                        };
                        classes.push((id, name.to_string(), tail));
                    }
                    ["pair", h, t] => {
                        let h = h.parse().map_err(|e| perr(ln, format!("pair: {e}")))?;
                        let t = t.parse().map_err(|e| perr(ln, format!("pair: {e}")))?;
                        pairs.push((h, t));
                    }
                    ["count", split, class, origin, n] => {
                        let split: Split = split.parse().map_err(|e| perr(ln, e))?;
                        let class: usize =
                            class.parse().map_err(|e| perr(ln, format!("count: {e}")))?;
                        let origin: Origin = origin.parse().map_err(|e| perr(ln, e))?;
                        let n: usize = n.parse().map_err(|e| perr(ln, format!("count: {e}")))?;
                        header_counts.insert((split, class, origin), n);
                    }
                    _ => return Err(perr(ln, format!("unrecognized header {line:?}"))),
                }
                continue;
            }
            if !seen_columns {
                if line != COLUMNS {
                    return Err(perr(ln, format!("expected column line {COLUMNS:?}")));
                }
                seen_columns = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let [id, path, class, split, origin] = f.as_slice() else {
                return Err(perr(ln, format!("expected 5 fields, got {}", f.len())));
            };
            records.push(Record {
                sample_id: id.to_string(),
                path: PathBuf::from(path),
                class_id: class.parse().map_err(|e| perr(ln, format!("class id: {e}")))?,
                split: split.parse().map_err(|e| perr(ln, e))?,
                origin: origin.parse().map_err(|e| perr(ln, e))?,
            });
        }
        classes.sort_by_key(|c| c.0);
        if classes.iter().enumerate().any(|(i, c)| c.0 != i) {
            return Err(perr(1, "class ids must be 0..n without gaps".into()));
        }
        let taxonomy = ClassTaxonomy::new(
            classes.iter().map(|c| c.1.clone()).collect(),
            classes.iter().filter(|c| !c.2).map(|c| c.0).collect::<BTreeSet<_>>(),
            classes.iter().filter(|c| c.2).map(|c| c.0).collect::<BTreeSet<_>>(),
            pairs,
        )?;
        let m = DatasetManifest::new(records, taxonomy, base_dir)?;
        let actual = m.counts();
        if actual != header_counts {
            return Err(perr(
                1,
                "header counts do not match the records".to_string(),
            ));
        }
        Ok(m)
    }
}

fn path_to_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn normalize(p: &Path) -> Result<PathBuf> {
    let abs = std::path::absolute(p).ctx(|| format!("resolving {}", p.display()))?;
    Ok(lexical_join(Path::new("/"), &abs))
}

fn lexical_join(base: &Path, rel: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in base.join(rel).components() {
        match c {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            other => out.push(other),
        }
    }
    out
}

/// Path of `target` relative to directory `from`; both absolute and normalized.
pub(crate) fn relative_path(from: &Path, target: &Path) -> PathBuf {
    let f: Vec<_> = from.components().collect();
    let t: Vec<_> = target.components().collect();
    let common = f.iter().zip(&t).take_while(|(a, b)| a == b).count();
    let mut out = PathBuf::new();
    for _ in common..f.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetManifest {
        let tax = ClassTaxonomy::new(
            vec!["a".into(), "b".into()],
            [0].into(),
            [1].into(),
            vec![(0, 1)],
        )
        .unwrap();
        let rec = |id: &str, c, split, origin| Record {
            sample_id: id.into(),
            path: PathBuf::from(format!("img/{id}.png")),
            class_id: c,
            split,
            origin,
        };
        DatasetManifest::new(
            vec![
                rec("x0", 0, Split::Train, Origin::Natural),
                rec("x1", 1, Split::Train, Origin::Synthetic),
                rec("x2", 1, Split::Test, Origin::Natural),
            ],
            tax,
            PathBuf::from("/data"),
        )
        .unwrap()
    }

    #[test]
    fn text_round_trip() {
        let m = tiny();
        let back = DatasetManifest::parse(&m.to_text(), Path::new("m.csv"), "/data".into()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn tampered_counts_are_rejected() {
        let text = tiny().to_text().replace("# count,train,0,natural,1", "# count,train,0,natural,2");
        let err = DatasetManifest::parse(&text, Path::new("m.csv"), "/".into()).unwrap_err();
        assert!(err.to_string().contains("header counts"));
    }

    #[test]
    fn synthetic_test_record_is_invalid() {
        let mut m = tiny();
        m.records[2].origin = Origin::Synthetic;
        assert!(m.validate().is_err());
    }

    #[test]
    fn duplicate_ids_are_invalid() {
        let mut m = tiny();
        m.records[1].sample_id = "x0".into();
        assert!(m.validate().is_err());
    }

    #[test]
    fn rebasing_rewrites_relative_paths() {
        let m = tiny().rebased(Path::new("/data/sub")).unwrap();
        assert_eq!(m.records[0].path, PathBuf::from("../img/x0.png"));
        assert_eq!(m.resolve(&m.records[0]), PathBuf::from("/data/sub/../img/x0.png"));
        let again = m.rebased(Path::new("/data")).unwrap();
        assert_eq!(again.records[0].path, PathBuf::from("img/x0.png"));
    }
}

//! Ingestion of user-supplied image folders.
//!
//! Two layouts are accepted: `<root>/<split>/<class>/*` with `train`, `val`
//! and `test` directories, or `<root>/<class>/*`, in which case each class is
//! divided into splits by a seeded permutation.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ClassTaxonomy, DatasetManifest, Origin, Record, Split};
use crate::error::{Error, IoContext, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSpec {
    pub root: PathBuf,
    /// Class directory names treated as tail; everything else is head.
    pub tail_classes: Vec<String>,
    /// Optional `(head, tail)` name pairs recorded in the taxonomy.
    #[serde(default)]
    pub similarity_pairs: Vec<(String, String)>,
    /// Used only for the flat layout.
    #[serde(default = "default_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_fraction() -> f64 {
    0.15
}

const EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn list_dirs(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).ctx(|| format!("listing {}", dir.display()))? {
        let e = e.ctx(|| format!("listing {}", dir.display()))?;
        if e.path().is_dir() {
            out.push(e.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).ctx(|| format!("listing {}", dir.display()))? {
        let p = e.ctx(|| format!("listing {}", dir.display()))?.path();
        let ok = p
            .extension()
            .and_then(|x| x.to_str())
            .is_some_and(|x| EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()));
        if ok && p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn ingest_folder(spec: &IngestSpec) -> Result<DatasetManifest> {
    let root = &spec.root;
    let top = list_dirs(root)?;
    let split_layout = ["test", "train", "val"].iter().all(|s| top.iter().any(|t| t == s));
    let class_names: Vec<String> = if split_layout {
        let mut all = BTreeSet::new();
        for s in Split::ALL {
            all.extend(list_dirs(&root.join(s.as_str()))?);
        }
        all.into_iter().collect()
    } else {
        top
    };
    if class_names.is_empty() {
        return Err(Error::invalid("image folder", format!("no class directories in {}", root.display())));
    }
    let id = |name: &str| class_names.iter().position(|n| n == name);
    let mut tail_ids = BTreeSet::new();
    for t in &spec.tail_classes {
        tail_ids.insert(id(t).ok_or_else(|| Error::invalid("tail class", format!("{t} not found")))?);
    }
    let head_ids = (0..class_names.len()).filter(|i| !tail_ids.contains(i)).collect();
    let mut pairs = Vec::new();
    for (h, t) in &spec.similarity_pairs {
        let (Some(h), Some(t)) = (id(h), id(t)) else {
            return Err(Error::invalid("similarity pair", format!("({h}, {t}) not found")));
        };
        pairs.push((h, t));
    }
    let taxonomy = ClassTaxonomy::new(class_names.clone(), head_ids, tail_ids, pairs)?;

    let mut records = Vec::new();
    let mut push = |path: &Path, class_id: usize, split: Split, idx: usize| {
        let rel = path.strip_prefix(root).unwrap_or(path).to_path_buf();
        records.push(Record {
            sample_id: format!("{split}_c{class_id:02}_{idx:05}"),
            path: rel,
            class_id,
            split,
            origin: Origin::Natural,
        });
    };
    if split_layout {
        for split in Split::ALL {
            for (c, name) in class_names.iter().enumerate() {
                let dir = root.join(split.as_str()).join(name);
                if dir.is_dir() {
                    for (i, p) in list_images(&dir)?.iter().enumerate() {
                        push(p, c, split, i);
                    }
                }
            }
        }
    } else {
        if !(0.0..1.0).contains(&(spec.val_fraction + spec.test_fraction)) {
            return Err(Error::invalid("split fractions", "val + test must be in [0, 1)"));
        }
        for (c, name) in class_names.iter().enumerate() {
            let files = list_images(&root.join(name))?;
            let n = files.len();
            let n_val = (n as f64 * spec.val_fraction).round() as usize;
            let n_test = (n as f64 * spec.test_fraction).round() as usize;
            let perm = SplitMix64::labelled(spec.seed, &format!("ingest/{name}")).permutation(n);
            for (rank, &p) in perm.iter().enumerate() {
                let split = if rank < n_test {
                    Split::Test
                } else if rank < n_test + n_val {
                    Split::Val
                } else {
                    Split::Train
                };
                push(&files[p], c, split, rank);
            }
        }
    }
    DatasetManifest::new(records, taxonomy, root.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_layout_is_split_by_fraction() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["alpha", "beta"] {
            for i in 0..10 {
                let img = image::RgbImage::new(4, 4);
                let p = dir.path().join(class).join(format!("{i}.png"));
                crate::corpus::texture::write_png(&p, &img).unwrap();
            }
        }
        let spec = IngestSpec {
            root: dir.path().to_path_buf(),
            tail_classes: vec!["beta".into()],
            similarity_pairs: vec![("alpha".into(), "beta".into())],
            val_fraction: 0.2,
            test_fraction: 0.3,
            seed: 1,
        };
        let m = ingest_folder(&spec).unwrap();
        assert_eq!(m.taxonomy.tail(), vec![1]);
        assert_eq!(m.count(Split::Test, 0), 3);
        assert_eq!(m.count(Split::Val, 1), 2);
        assert_eq!(m.count(Split::Train, 1), 5);
        assert!(m.resolve(&m.records[0]).exists());
    }
}

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::synthetic::{read_metadata, InclusionPolicy};
use super::{ClassTaxonomy, DatasetManifest, Origin, Record, Split};
use crate::error::{ClassShortfall, Error, Result};
use crate::rng::SplitMix64;

/// Per-split per-class caps. Classes without an entry keep all records.
pub type SplitCaps = BTreeMap<(Split, usize), usize>;

/// Caps every head class at `head` and every tail class at `tail` in `split`.
pub fn uniform_caps(taxonomy: &ClassTaxonomy, split: Split, head: usize, tail: usize) -> SplitCaps {
    (0..taxonomy.n_classes())
        .map(|c| ((split, c), if taxonomy.is_tail(c) { tail } else { head }))
        .collect()
}

/// Subsamples the train and validation splits to `caps`.
///
/// Each `(split, class)` group is permuted by a SplitMix64 stream keyed by
/// `(seed, split, class)` and the first `cap` records are kept; survivors
/// stay in their original order, so caps equal to the full counts return the
/// input unchanged. The test split is never touched.
pub fn build_longtail_split(
    full: &DatasetManifest,
    taxonomy: &ClassTaxonomy,
    caps: &SplitCaps,
    seed: u64,
) -> Result<DatasetManifest> {
    taxonomy.validate()?;
    if taxonomy.n_classes() != full.taxonomy.n_classes() {
        return Err(Error::invalid(
            "taxonomy",
            format!(
                "{} classes, manifest has {}",
                taxonomy.n_classes(),
                full.taxonomy.n_classes()
            ),
        ));
    }
    if caps.keys().any(|(s, _)| *s == Split::Test) {
        return Err(Error::invalid("split caps", "the test split cannot be subsampled"));
    }
    let mut groups: BTreeMap<(Split, usize), Vec<usize>> = BTreeMap::new();
    for (i, r) in full.records.iter().enumerate() {
        groups.entry((r.split, r.class_id)).or_default().push(i);
    }
    let mut shortfalls = Vec::new();
    for (&(split, class), &cap) in caps {
        let available = groups.get(&(split, class)).map_or(0, Vec::len);
        if cap > available {
            shortfalls.push(ClassShortfall {
                class: format!("{}/{}", split, taxonomy.name(class)),
                requested: cap,
                available,
            });
        }
    }
    if !shortfalls.is_empty() {
        return Err(Error::Shortfall {
            context: "long-tail split".into(),
            classes: shortfalls,
        });
    }
    let mut keep = BTreeSet::new();
    for (&(split, class), idx) in &groups {
        match caps.get(&(split, class)) {
            Some(&cap) if split != Split::Test => {
                let mut rng = SplitMix64::labelled(seed, &format!("split/{split}/{class}"));
                let perm = rng.permutation(idx.len());
                keep.extend(perm.into_iter().take(cap).map(|p| idx[p]));
            }
            _ => keep.extend(idx.iter().copied()),
        }
    }
    let records = full
        .records
        .iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, r)| r.clone())
        .collect();
    DatasetManifest::new(records, taxonomy.clone(), full.base_dir.clone())
}

/// Adds `per_class_n` synthetic training records to every tail class.
///
/// Records are read from `synthetic_dir`'s metadata table in file order,
/// skipping those `policy` rejects.
pub fn merge_synthetic(
    manifest: &DatasetManifest,
    synthetic_dir: &Path,
    per_class_n: usize,
    policy: InclusionPolicy,
) -> Result<DatasetManifest> {
    merge(manifest, synthetic_dir, per_class_n, policy, true)
}

/// Like [`merge_synthetic`], but a tail class with fewer admitted images
/// than `per_class_n` contributes all it has instead of failing.
pub fn merge_synthetic_up_to(
    manifest: &DatasetManifest,
    synthetic_dir: &Path,
    per_class_n: usize,
    policy: InclusionPolicy,
) -> Result<DatasetManifest> {
    merge(manifest, synthetic_dir, per_class_n, policy, false)
}

fn merge(
    manifest: &DatasetManifest,
    synthetic_dir: &Path,
    per_class_n: usize,
    policy: InclusionPolicy,
    strict: bool,
) -> Result<DatasetManifest> {
    if per_class_n == 0 {
        return Ok(manifest.clone());
    }
    let rows = read_metadata(synthetic_dir)?;
    let tax = &manifest.taxonomy;
    let mut by_class: BTreeMap<usize, Vec<_>> = BTreeMap::new();
    for r in rows.iter().filter(|r| policy.admits(r)) {
        if !tax.is_tail(r.class_id) {
            return Err(Error::invalid(
                "synthetic metadata",
                format!("record with seed {} targets head class {}", r.seed, r.class_id),
            ));
        }
        by_class.entry(r.class_id).or_default().push(r);
    }
    let shortfalls: Vec<_> = tax
        .tail()
        .into_iter()
        .filter_map(|c| {
            let available = by_class.get(&c).map_or(0, Vec::len);
            (available < per_class_n).then(|| ClassShortfall {
                class: tax.name(c).to_string(),
                requested: per_class_n,
                available,
            })
        })
        .collect();
    if strict && !shortfalls.is_empty() {
        return Err(Error::Shortfall {
            context: format!("synthetic images in {}", synthetic_dir.display()),
            classes: shortfalls,
        });
    }
    let syn_dir = std::path::absolute(synthetic_dir).map_err(|source| Error::Io {
        context: format!("resolving {}", synthetic_dir.display()),
        source,
    })?;
    let mut added = Vec::new();
    for (class, rows) in &by_class {
        for r in rows.iter().take(per_class_n) {
            added.push(Record {
                sample_id: format!("syn_c{class:02}_{}", r.seed),
                path: syn_dir.join(&r.path),
                class_id: *class,
                split: Split::Train,
                origin: Origin::Synthetic,
            });
        }
    }
    let synthetic = DatasetManifest {
        records: added,
        taxonomy: tax.clone(),
        base_dir: "/".into(),
    }
    .rebased(&manifest.base_dir)?;
    let mut out = manifest.clone();
    out.records.extend(synthetic.records);
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::{write_metadata, SyntheticRecord, Termination};
    use std::path::PathBuf;

    fn manifest(per_class: &[usize]) -> DatasetManifest {
        let n = per_class.len();
        let tax = ClassTaxonomy::new(
            (0..n).map(|i| format!("c{i}")).collect(),
            (0..n / 2).collect(),
            (n / 2..n).collect(),
            vec![],
        )
        .unwrap();
        let mut recs = Vec::new();
        for split in Split::ALL {
            for (c, &k) in per_class.iter().enumerate() {
                for i in 0..k {
                    let id = format!("{split}_{c}_{i}");
                    recs.push(Record {
                        path: PathBuf::from(format!("{id}.png")),
                        sample_id: id,
                        class_id: c,
                        split,
                        origin: Origin::Natural,
                    });
                }
            }
        }
        DatasetManifest::new(recs, tax, "/data".into()).unwrap()
    }

    #[test]
    fn full_caps_are_identity() {
        let m = manifest(&[30, 30, 12, 12]);
        let mut caps = uniform_caps(&m.taxonomy, Split::Train, 30, 12);
        caps.extend(uniform_caps(&m.taxonomy, Split::Val, 30, 12));
        let out = build_longtail_split(&m, &m.taxonomy, &caps, 5).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn caps_subsample_and_leave_test_alone() {
        let m = manifest(&[30, 30, 12, 12]);
        let mut caps = uniform_caps(&m.taxonomy, Split::Train, 20, 3);
        caps.extend(uniform_caps(&m.taxonomy, Split::Val, 10, 2));
        let out = build_longtail_split(&m, &m.taxonomy, &caps, 5).unwrap();
        assert_eq!(out.train_class_counts(), vec![20, 20, 3, 3]);
        assert_eq!(out.count(Split::Val, 1), 10);
        assert_eq!(out.count(Split::Val, 2), 2);
        assert_eq!(out.split_records(Split::Test), m.split_records(Split::Test));
        // Idempotent under the same seed and caps.
        let again = build_longtail_split(&out, &out.taxonomy, &caps, 5).unwrap();
        assert_eq!(again, out);
        // A different seed picks a different subset.
        let other = build_longtail_split(&m, &m.taxonomy, &caps, 6).unwrap();
        assert_ne!(other.records, out.records);
    }

    #[test]
    fn oversized_cap_names_the_class() {
        let m = manifest(&[30, 30, 10, 10]);
        let caps: SplitCaps = [((Split::Train, 2), 50)].into();
        let err = build_longtail_split(&m, &m.taxonomy, &caps, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train/c2") && msg.contains("requested 50") && msg.contains("available 10"), "{msg}");
    }

    #[test]
    fn test_caps_are_rejected() {
        let m = manifest(&[3, 3, 1, 1]);
        let caps: SplitCaps = [((Split::Test, 0), 1)].into();
        assert!(build_longtail_split(&m, &m.taxonomy, &caps, 0).is_err());
    }

    fn synthetic_dir(classes: &[usize], per: usize, failing_every: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let mut rows = Vec::new();
        for &c in classes {
            for s in 0..per {
                rows.push(SyntheticRecord {
                    class_id: c,
                    seed: (c * 1000 + s) as u64,
                    final_confidence: 0.5,
                    termination: if failing_every > 0 && s % failing_every == 0 {
                        Termination::MaxSteps
                    } else {
                        Termination::ThresholdMet
                    },
                    steps_used: 3,
                    path: PathBuf::from(format!("images/{c}/{s}.png")),
                });
            }
        }
        write_metadata(dir.path(), &rows).unwrap();
        dir
    }

    #[test]
    fn merge_adds_train_records_to_tail_only() {
        let m = manifest(&[5, 5, 2, 2]);
        let syn = synthetic_dir(&[2, 3], 8, 0);
        let out = merge_synthetic(&m, syn.path(), 6, InclusionPolicy::All).unwrap();
        assert_eq!(out.train_class_counts(), vec![5, 5, 8, 8]);
        let added: Vec<_> = out.records.iter().filter(|r| r.origin == Origin::Synthetic).collect();
        assert_eq!(added.len(), 12);
        assert!(added.iter().all(|r| r.split == Split::Train));
        let expect = syn.path().join("images/2/0.png");
        let rooted = out.rebased(Path::new("/")).unwrap();
        assert!(rooted.records.iter().any(|r| Path::new("/").join(&r.path) == expect));
    }

    #[test]
    fn merge_zero_is_identity_and_shortfall_is_reported() {
        let m = manifest(&[5, 5, 2, 2]);
        let syn = synthetic_dir(&[2, 3], 4, 2);
        assert_eq!(merge_synthetic(&m, syn.path(), 0, InclusionPolicy::All).unwrap(), m);
        // Half of each class fails the threshold: 2 admitted per class.
        let err = merge_synthetic(&m, syn.path(), 3, InclusionPolicy::ThresholdMetOnly).unwrap_err();
        assert!(matches!(err, Error::Shortfall { .. }));
        assert!(merge_synthetic(&m, syn.path(), 2, InclusionPolicy::ThresholdMetOnly).is_ok());
    }
}

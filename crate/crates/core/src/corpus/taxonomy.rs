use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class names with the head/tail partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTaxonomy {
    pub class_names: Vec<String>,
    pub head_ids: BTreeSet<usize>,
    pub tail_ids: BTreeSet<usize>,
    /// `(head_id, tail_id)` pairs built from the same base texture.
    pub similarity_pairs: Vec<(usize, usize)>,
}

impl ClassTaxonomy {
    pub fn new(
        class_names: Vec<String>,
        head_ids: BTreeSet<usize>,
        tail_ids: BTreeSet<usize>,
        similarity_pairs: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let t = Self {
            class_names,
            head_ids,
            tail_ids,
            similarity_pairs,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.class_names.len();
        if n == 0 {
            return Err(Error::invalid("taxonomy", "no classes"));
        }
        if let Some(id) = self.head_ids.intersection(&self.tail_ids).next() {
            return Err(Error::invalid(
                "taxonomy",
                format!("class {id} is both head and tail"),
            ));
        }
        let covered: BTreeSet<usize> = self.head_ids.union(&self.tail_ids).copied().collect();
        if covered != (0..n).collect() {
            return Err(Error::invalid(
                "taxonomy",
                format!("head and tail ids must cover exactly 0..{n}"),
            ));
        }
        if self.head_ids.is_empty() || self.tail_ids.is_empty() {
            return Err(Error::invalid("taxonomy", "head and tail must both be nonempty"));
        }
        for &(h, t) in &self.similarity_pairs {
            if !self.head_ids.contains(&h) || !self.tail_ids.contains(&t) {
                return Err(Error::invalid(
                    "taxonomy",
                    format!("similarity pair ({h}, {t}) must link a head id to a tail id"),
                ));
            }
        }
        let mut seen = BTreeSet::new();
        for name in &self.class_names {
            if name.is_empty() || name.contains([',', '\n', '\r', '/', '\\']) {
                return Err(Error::invalid("taxonomy", format!("bad class name {name:?}")));
            }
            if !seen.insert(name) {
                return Err(Error::invalid("taxonomy", format!("duplicate class name {name}")));
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_tail(&self, id: usize) -> bool {
        self.tail_ids.contains(&id)
    }

    pub fn head(&self) -> Vec<usize> {
        self.head_ids.iter().copied().collect()
    }

    pub fn tail(&self) -> Vec<usize> {
        self.tail_ids.iter().copied().collect()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.class_names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    /// Per-class boolean mask, `true` for tail classes.
    pub fn tail_mask(&self) -> Vec<bool> {
        (0..self.n_classes()).map(|i| self.is_tail(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn rejects_overlap_and_gaps() {
        let overlap = ClassTaxonomy::new(names(3), [0, 1].into(), [1, 2].into(), vec![]);
        assert!(overlap.is_err());
        let gap = ClassTaxonomy::new(names(3), [0].into(), [2].into(), vec![]);
        assert!(gap.is_err());
    }

    #[test]
    fn pairs_must_cross_the_partition() {
        let bad = ClassTaxonomy::new(names(4), [0, 1].into(), [2, 3].into(), vec![(2, 3)]);
        assert!(bad.is_err());
        let ok = ClassTaxonomy::new(names(4), [0, 1].into(), [2, 3].into(), vec![(0, 2), (1, 3)]);
        assert!(ok.is_ok());
    }
}

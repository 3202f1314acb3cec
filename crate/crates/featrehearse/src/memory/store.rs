//! The per-class descriptor store.

use super::herding::herding_select;
use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2};
use std::collections::BTreeMap;

/// One remembered feature vector. `adapt_count` records how many times the
/// vector has been pushed through an adapter since extraction;
/// `source_index` optionally points back at the training row it came from
/// (needed by the adaptation-quality diagnostic).
#[derive(Debug, Clone, PartialEq)]
pub struct StoredDescriptor {
    pub vector: Vec<f32>,
    pub adapt_count: u32,
    pub source_index: Option<u32>,
}

/// Class-keyed descriptor memory with a fixed per-class budget. Iteration
/// order is always ascending class id.
#[derive(Debug, Clone)]
pub struct FeatureMemory {
    dim: usize,
    per_class_budget: usize,
    classes: BTreeMap<u32, Vec<StoredDescriptor>>,
}

impl FeatureMemory {
    pub fn new(dim: usize, per_class_budget: usize) -> Self {
        Self {
            dim,
            per_class_budget,
            classes: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn per_class_budget(&self) -> usize {
        self.per_class_budget
    }
    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.keys().copied().collect()
    }
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }
    pub fn count(&self, class: u32) -> usize {
        self.classes.get(&class).map_or(0, Vec::len)
    }
    pub fn total(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }
    pub fn descriptors(&self, class: u32) -> Option<&[StoredDescriptor]> {
        self.classes.get(&class).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &[StoredDescriptor])> {
        self.classes.iter().map(|(&c, v)| (c, v.as_slice()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (u32, &mut Vec<StoredDescriptor>)> {
        self.classes.iter_mut().map(|(&c, v)| (c, v))
    }

    /// Inserts an already-selected descriptor list for a new class.
    pub fn insert_class(&mut self, class: u32, descriptors: Vec<StoredDescriptor>) -> Result<()> {
        if self.classes.contains_key(&class) {
            return Err(Error::Consistency(format!(
                "class {class} is already present in memory"
            )));
        }
        if descriptors.is_empty() {
            return Err(Error::EmptyClass(format!(
                "refusing to store class {class} with zero descriptors"
            )));
        }
        if descriptors.len() > self.per_class_budget {
            return Err(Error::Consistency(format!(
                "class {class}: {} descriptors exceed the per-class budget {}",
                descriptors.len(),
                self.per_class_budget
            )));
        }
        if let Some(bad) = descriptors.iter().find(|d| d.vector.len() != self.dim) {
            return Err(Error::Dimension(format!(
                "class {class}: descriptor of length {} in a {}-dim memory",
                bad.vector.len(),
                self.dim
            )));
        }
        self.classes.insert(class, descriptors);
        Ok(())
    }

    /// Herds a task's features class by class and stores the selections.
    /// `features` rows must align with `labels` (and `provenance` rows when
    /// given, as indices into the task's training set).
    pub fn store_task_features(
        &mut self,
        features: ArrayView2<f32>,
        labels: &[u32],
        provenance: Option<&[u32]>,
    ) -> Result<()> {
        if features.nrows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} feature rows against {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.ncols() != self.dim {
            return Err(Error::Dimension(format!(
                "{}-dim features in a {}-dim memory",
                features.ncols(),
                self.dim
            )));
        }
        if let Some(p) = provenance {
            if p.len() != labels.len() {
                return Err(Error::Consistency(format!(
                    "{} provenance entries against {} labels",
                    p.len(),
                    labels.len()
                )));
            }
        }
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (row, &label) in labels.iter().enumerate() {
            by_class.entry(label).or_default().push(row);
        }
        for (class, rows) in by_class {
            let mut class_feats = Array2::zeros((rows.len(), self.dim));
            for (i, &row) in rows.iter().enumerate() {
                class_feats.row_mut(i).assign(&features.row(row));
            }
            let picked = herding_select(class_feats.view(), self.per_class_budget)?;
            let descriptors = picked
                .into_iter()
                .map(|i| {
                    let row = rows[i];
                    StoredDescriptor {
                        vector: features.row(row).to_vec(),
                        adapt_count: 0,
                        source_index: provenance.map(|p| p[row]),
                    }
                })
                .collect();
            self.insert_class(class, descriptors)?;
        }
        Ok(())
    }

    /// All descriptors of one class as a matrix.
    pub fn class_matrix(&self, class: u32) -> Option<Array2<f32>> {
        let descs = self.classes.get(&class)?;
        let mut m = Array2::zeros((descs.len(), self.dim));
        for (i, d) in descs.iter().enumerate() {
            for (j, &v) in d.vector.iter().enumerate() {
                m[[i, j]] = v;
            }
        }
        Some(m)
    }

    /// Every stored descriptor as (matrix, class labels), ascending class id.
    pub fn all_rows(&self) -> (Array2<f32>, Vec<u32>) {
        let total = self.total();
        let mut m = Array2::zeros((total, self.dim));
        let mut labels = Vec::with_capacity(total);
        let mut at = 0;
        for (&class, descs) in &self.classes {
            for d in descs {
                for (j, &v) in d.vector.iter().enumerate() {
                    m[[at, j]] = v;
                }
                labels.push(class);
                at += 1;
            }
        }
        (m, labels)
    }
}

//! Balanced feature classifier over stored descriptors.
//!
//! After every task a fresh one-vs-rest linear classifier is trained on the
//! descriptor memory and used for all reported predictions. Training
//! minimizes an l2-regularized hinge loss by deterministic mini-batch
//! subgradient descent; in balanced mode each class contributes exactly the
//! minimum per-class count, subsampled by seed.

use crate::data::shuffled_chunks;
use crate::error::{Error, Result};
use crate::memory::FeatureMemory;
use crate::rng::{stream_rng, stream_seed};
use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Settings for feature-classifier training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Inverse regularization strength; the hinge objective uses
    /// `lambda = 1 / (c_reg * n)`.
    pub c_reg: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial step size; decays linearly to a tenth over the epoch budget.
    pub learning_rate: f64,
    /// Subsample every class down to the minimum per-class count.
    pub balanced: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            c_reg: 1.0,
            epochs: 100,
            batch_size: 64,
            learning_rate: 0.5,
            balanced: true,
        }
    }
}

/// One-vs-rest linear classifier over feature descriptors.
#[derive(Debug, Clone)]
pub struct FeatureClassifier {
    /// One row per covered class, ascending class id.
    weight: Array2<f32>,
    bias: Array1<f32>,
    class_ids: Vec<u32>,
    c_reg: f32,
}

impl FeatureClassifier {
    /// Rebuild from stored parts (checkpoint loading).
    pub fn from_parts(
        weight: Array2<f32>,
        bias: Array1<f32>,
        class_ids: Vec<u32>,
        c_reg: f32,
    ) -> Result<Self> {
        if weight.nrows() != class_ids.len() || bias.len() != class_ids.len() {
            return Err(Error::Dimension(format!(
                "classifier parts disagree: {} weight rows, {} biases, {} classes",
                weight.nrows(),
                bias.len(),
                class_ids.len()
            )));
        }
        if class_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Consistency(
                "classifier class ids must be strictly ascending".into(),
            ));
        }
        Ok(Self {
            weight,
            bias,
            class_ids,
            c_reg,
        })
    }

    pub fn dim(&self) -> usize {
        self.weight.ncols()
    }
    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }
    pub fn weight(&self) -> &Array2<f32> {
        &self.weight
    }
    pub fn bias(&self) -> &Array1<f32> {
        &self.bias
    }
    pub fn c_reg(&self) -> f32 {
        self.c_reg
    }

    /// Per-class decision values, one row per input feature.
    pub fn scores(&self, features: ArrayView2<f32>) -> Result<Array2<f32>> {
        if features.ncols() != self.dim() {
            return Err(Error::Dimension(format!(
                "classifier expects {}-dim features, got {}",
                self.dim(),
                features.ncols()
            )));
        }
        Ok(features.dot(&self.weight.t()) + &self.bias)
    }

    /// Predicted class ids, ties broken by lowest class id.
    ///
    /// Inputs must be l2-normalized by the caller (zero vectors pass through
    /// unnormalized); this is asserted, not silently repaired.
    pub fn classify(&self, features: ArrayView2<f32>) -> Result<Vec<u32>> {
        for row in features.rows() {
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!(
                (norm - 1.0).abs() < 1e-3 || norm < 1e-6,
                "classify expects unit-norm features, got norm {norm}"
            );
        }
        let scores = self.scores(features)?;
        Ok(scores
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0usize;
                for (k, &s) in row.iter().enumerate() {
                    if s > row[best] {
                        best = k;
                    }
                }
                self.class_ids[best]
            })
            .collect())
    }
}

/// Row indices keeping exactly the minimum per-class count for every class,
/// subsampled by seed. The result is ordered by class id, then by row index.
pub fn balanced_subsample(labels: &[u32], seed: u64) -> Vec<usize> {
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &label) in labels.iter().enumerate() {
        by_class.entry(label).or_default().push(i);
    }
    let target = by_class.values().map(Vec::len).min().unwrap_or(0);
    let mut keep = Vec::with_capacity(target * by_class.len());
    for (class, mut rows) in by_class {
        rows.shuffle(&mut stream_rng(seed, "classifier/balance", class as u64));
        rows.truncate(target);
        rows.sort_unstable();
        keep.extend(rows);
    }
    keep
}

/// Train a one-vs-rest hinge classifier on an explicit feature pool.
pub fn train_on_pool(
    features: ArrayView2<f32>,
    labels: &[u32],
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<FeatureClassifier> {
    if features.nrows() == 0 {
        return Err(Error::EmptyDataset("classifier training pool".into()));
    }
    if labels.len() != features.nrows() {
        return Err(Error::Consistency(format!(
            "{} features but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if cfg.epochs == 0 {
        return Err(Error::Config("classifier epochs must be positive".into()));
    }
    if !(cfg.c_reg.is_finite() && cfg.c_reg > 0.0) {
        return Err(Error::Config(format!(
            "classifier c_reg must be positive, got {}",
            cfg.c_reg
        )));
    }

    let (pool, pool_labels): (Array2<f32>, Vec<u32>) = if cfg.balanced {
        let keep = balanced_subsample(labels, seed);
        let mut sub = Array2::zeros((keep.len(), features.ncols()));
        let mut sub_labels = Vec::with_capacity(keep.len());
        for (row, &src) in keep.iter().enumerate() {
            sub.row_mut(row).assign(&features.row(src));
            sub_labels.push(labels[src]);
        }
        (sub, sub_labels)
    } else {
        (features.to_owned(), labels.to_vec())
    };

    let mut class_ids: Vec<u32> = pool_labels.clone();
    class_ids.sort_unstable();
    class_ids.dedup();
    if cfg.balanced {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for &label in &pool_labels {
            *counts.entry(label).or_default() += 1;
        }
        let first = *counts.values().next().unwrap();
        assert!(
            counts.values().all(|&c| c == first),
            "balanced subsample produced unequal class counts: {counts:?}"
        );
    }

    let n = pool.nrows();
    let k = class_ids.len();
    let d = pool.ncols();
    let lambda = (1.0 / (cfg.c_reg * n as f64)) as f32;
    let col_of = |label: u32| class_ids.binary_search(&label).unwrap();

    // Signed one-vs-rest targets, one column per class.
    let mut targets = Array2::from_elem((n, k), -1.0f32);
    for (i, &label) in pool_labels.iter().enumerate() {
        targets[(i, col_of(label))] = 1.0;
    }

    let mut weight = Array2::<f32>::zeros((k, d));
    let mut bias = Array1::<f32>::zeros(k);
    let rows: Vec<u32> = (0..n as u32).collect();
    for epoch in 0..cfg.epochs {
        let lr = (cfg.learning_rate * (1.0 - 0.9 * epoch as f64 / cfg.epochs as f64)) as f32;
        let batches = shuffled_chunks(
            &rows,
            cfg.batch_size,
            stream_seed(seed, "classifier/epoch", epoch as u64),
        )?;
        for batch in &batches {
            let b = batch.len();
            let mut xb = Array2::zeros((b, d));
            let mut yb = Array2::zeros((b, k));
            for (i, &r) in batch.iter().enumerate() {
                xb.row_mut(i).assign(&pool.row(r as usize));
                yb.row_mut(i).assign(&targets.row(r as usize));
            }
            let scores = xb.dot(&weight.t()) + &bias;
            // Subgradient contributes -y*x only where the margin is violated.
            let active = ndarray::Zip::from(&yb)
                .and(&scores)
                .map_collect(|&y, &s| if y * s < 1.0 { y } else { 0.0 });
            let scale = 1.0 / b as f32;
            let grad_w = &weight * lambda - &(active.t().dot(&xb) * scale);
            let grad_b = active.sum_axis(ndarray::Axis(0)) * -scale;
            weight = weight - &grad_w * lr;
            bias = bias - grad_b * lr;
        }
    }

    FeatureClassifier::from_parts(weight, bias, class_ids, cfg.c_reg as f32)
}

/// Train the feature classifier on the descriptor memory.
pub fn train_feature_classifier(
    memory: &FeatureMemory,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<FeatureClassifier> {
    for (class, descriptors) in memory.iter() {
        if descriptors.is_empty() {
            return Err(Error::Consistency(format!(
                "memory class {class} has no descriptors"
            )));
        }
    }
    let (rows, labels) = memory.all_rows();
    train_on_pool(rows.view(), &labels, cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::StoredDescriptor;
    use crate::real::normalize_in_place;
    use rand::Rng;

    /// Two unit-norm clusters around +e0 and -e0.
    fn separable(n_per_class: usize) -> (Array2<f32>, Vec<u32>) {
        let mut rng = stream_rng(11, "clf-fixture", 0);
        let d = 4;
        let mut x = Array2::zeros((2 * n_per_class, d));
        let mut labels = Vec::new();
        for i in 0..2 * n_per_class {
            let class = (i % 2) as u32;
            let sign = if class == 0 { 1.0 } else { -1.0 };
            x[(i, 0)] = sign;
            for j in 1..d {
                x[(i, j)] = rng.gen_range(-0.3..0.3);
            }
            let mut row = x.row_mut(i);
            normalize_in_place(row.as_slice_mut().unwrap());
            labels.push(class);
        }
        (x, labels)
    }

    #[test]
    fn separable_classes_reach_zero_training_error() {
        let (x, labels) = separable(40);
        let clf = train_on_pool(x.view(), &labels, &ClassifierConfig::default(), 5).unwrap();
        let predictions = clf.classify(x.view()).unwrap();
        assert_eq!(predictions, labels);
        assert_eq!(predictions.len(), x.nrows());
    }

    #[test]
    fn balanced_subsample_keeps_min_count_per_class() {
        // Class 3 has 250 rows, class 7 has 1300; balanced keeps 250 each.
        let mut labels = vec![3u32; 250];
        labels.extend(vec![7u32; 1300]);
        let keep = balanced_subsample(&labels, 9);
        assert_eq!(keep.len(), 500);
        let class3 = keep.iter().filter(|&&i| labels[i] == 3).count();
        let class7 = keep.iter().filter(|&&i| labels[i] == 7).count();
        assert_eq!((class3, class7), (250, 250));
        // Same seed reproduces the same multiset; different seed moves it.
        assert_eq!(keep, balanced_subsample(&labels, 9));
        assert_ne!(keep, balanced_subsample(&labels, 10));
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let (x, labels) = separable(30);
        let cfg = ClassifierConfig::default();
        let a = train_on_pool(x.view(), &labels, &cfg, 5).unwrap();
        let b = train_on_pool(x.view(), &labels, &cfg, 5).unwrap();
        assert_eq!(a.weight(), b.weight());
        assert_eq!(a.bias(), b.bias());
        let c = train_on_pool(x.view(), &labels, &cfg, 6).unwrap();
        assert_ne!(a.weight(), c.weight());
    }

    #[test]
    fn tie_break_prefers_lowest_class_id() {
        let weight = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let clf = FeatureClassifier::from_parts(
            weight,
            Array1::zeros(2),
            vec![2, 5],
            1.0,
        )
        .unwrap();
        // Zero vector scores zero everywhere: lowest covered class id wins.
        let x = ndarray::arr2(&[[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(clf.classify(x.view()).unwrap(), vec![2, 5, 2]);
    }

    #[test]
    #[should_panic(expected = "unit-norm")]
    fn classify_asserts_caller_normalization() {
        let clf = FeatureClassifier::from_parts(
            ndarray::arr2(&[[1.0, 0.0]]),
            Array1::zeros(1),
            vec![0],
            1.0,
        )
        .unwrap();
        let _ = clf.classify(ndarray::arr2(&[[3.0, 4.0]]).view());
    }

    #[test]
    fn memory_path_matches_pool_path() {
        let (x, labels) = separable(12);
        let mut memory = FeatureMemory::new(4, 64);
        for class in [0u32, 1] {
            let descriptors: Vec<StoredDescriptor> = x
                .rows()
                .into_iter()
                .zip(&labels)
                .filter(|(_, &l)| l == class)
                .map(|(row, _)| StoredDescriptor {
                    vector: row.to_vec(),
                    adapt_count: 0,
                    source_index: None,
                })
                .collect();
            memory.insert_class(class, descriptors).unwrap();
        }
        let cfg = ClassifierConfig::default();
        let from_memory = train_feature_classifier(&memory, &cfg, 5).unwrap();
        let (rows, row_labels) = memory.all_rows();
        let from_pool = train_on_pool(rows.view(), &row_labels, &cfg, 5).unwrap();
        assert_eq!(from_memory.weight(), from_pool.weight());
        assert_eq!(from_memory.class_ids(), &[0, 1]);
    }

    #[test]
    fn rejects_empty_and_mismatched_pools() {
        let empty = Array2::<f32>::zeros((0, 3));
        let err = train_on_pool(empty.view(), &[], &ClassifierConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset(_)));
        let x = Array2::<f32>::zeros((2, 3));
        let err =
            train_on_pool(x.view(), &[0], &ClassifierConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Consistency(_)));
        let clf = FeatureClassifier::from_parts(
            ndarray::arr2(&[[1.0, 0.0, 0.0]]),
            Array1::zeros(1),
            vec![0],
            1.0,
        )
        .unwrap();
        let narrow = Array2::<f32>::zeros((1, 2));
        assert!(matches!(
            clf.classify(narrow.view()).unwrap_err(),
            Error::Dimension(_)
        ));
    }
}

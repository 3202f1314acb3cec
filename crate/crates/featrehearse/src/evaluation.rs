//! Run metrics: per-task accuracy curve, its average, and adaptation quality.
//!
//! Accuracy is top-1 over the cumulative test set of all classes seen so far,
//! computed on l2-normalized features. Adaptation quality scores each stored
//! descriptor against a fresh extraction of its source image under the current
//! extractor, so it is only available when descriptor provenance is tracked.

use crate::binio::atomic_write;
use crate::classifier::FeatureClassifier;
use crate::data::{gather_batch, ChannelStats, ImageSource};
use crate::error::{Error, Result};
use crate::memory::{FeatureMemory, FootprintReport};
use crate::model::{normalize_rows, CosineHead, Extractor};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Anything that maps a batch of unit-norm features to class-id predictions.
pub trait FeaturePredictor {
    /// Class id carried by each score column.
    fn class_ids(&self) -> Vec<u32>;
    fn scores(&self, features: ArrayView2<f32>) -> Result<Array2<f32>>;
    fn predict(&self, features: ArrayView2<f32>) -> Result<Vec<u32>>;
}

impl FeaturePredictor for FeatureClassifier {
    fn class_ids(&self) -> Vec<u32> {
        FeatureClassifier::class_ids(self).to_vec()
    }
    fn scores(&self, features: ArrayView2<f32>) -> Result<Array2<f32>> {
        FeatureClassifier::scores(self, features)
    }
    fn predict(&self, features: ArrayView2<f32>) -> Result<Vec<u32>> {
        self.classify(features)
    }
}

/// Predicts straight from the network's cosine head; used by the baseline
/// that keeps no descriptor memory.
pub struct HeadPredictor<'a> {
    pub head: &'a CosineHead<f32>,
    /// Class id carried by each head column.
    pub class_layout: &'a [u32],
}

impl FeaturePredictor for HeadPredictor<'_> {
    fn class_ids(&self) -> Vec<u32> {
        self.class_layout.to_vec()
    }
    fn scores(&self, features: ArrayView2<f32>) -> Result<Array2<f32>> {
        if self.class_layout.len() != self.head.classes() {
            return Err(Error::Consistency(format!(
                "head has {} columns but class layout lists {}",
                self.head.classes(),
                self.class_layout.len()
            )));
        }
        if features.ncols() != self.head.dim() {
            return Err(Error::Dimension(format!(
                "head expects {}-dim features, got {}",
                self.head.dim(),
                features.ncols()
            )));
        }
        Ok(self.head.scores(&features.to_owned()))
    }
    fn predict(&self, features: ArrayView2<f32>) -> Result<Vec<u32>> {
        let scores = self.scores(features)?;
        Ok(scores
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0usize;
                for (k, &s) in row.iter().enumerate() {
                    let better = s > row[best]
                        || (s == row[best] && self.class_layout[k] < self.class_layout[best]);
                    if better {
                        best = k;
                    }
                }
                self.class_layout[best]
            })
            .collect())
    }
}

/// Whether `label` is among the `k` best-scored classes of one score row
/// (ties broken toward lower class ids, matching top-1 prediction at k = 1).
fn in_top_k(row: ndarray::ArrayView1<f32>, class_ids: &[u32], label: u32, k: usize) -> bool {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(class_ids[a].cmp(&class_ids[b]))
    });
    order.iter().take(k).any(|&c| class_ids[c] == label)
}

/// Top-k accuracy of `predictor` over the given test rows.
pub fn evaluate_task<P: FeaturePredictor, S: ImageSource>(
    predictor: &P,
    extractor: &Extractor<f32>,
    stats: &ChannelStats,
    source: &S,
    indices: &[u32],
    batch_size: usize,
    top_k: usize,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    if batch_size == 0 || top_k == 0 {
        return Err(Error::Config(
            "evaluation batch size and top_k must be positive".into(),
        ));
    }
    let class_ids = predictor.class_ids();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size) {
        let x = gather_batch::<f32, _>(source, chunk, stats);
        let features = normalize_rows(extractor.features(&x));
        if top_k == 1 {
            let predictions = predictor.predict(features.view())?;
            for (&index, prediction) in chunk.iter().zip(predictions) {
                if prediction == source.label(index as usize) {
                    correct += 1;
                }
            }
        } else {
            let scores = predictor.scores(features.view())?;
            for (&index, row) in chunk.iter().zip(scores.rows()) {
                if in_top_k(row, &class_ids, source.label(index as usize), top_k) {
                    correct += 1;
                }
            }
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Arithmetic mean of the accuracy curve.
pub fn average_incremental_accuracy(curve: &[f64]) -> Result<f64> {
    if curve.is_empty() {
        return Err(Error::Evaluation(
            "cannot average an empty accuracy curve".into(),
        ));
    }
    Ok(curve.iter().sum::<f64>() / curve.len() as f64)
}

/// Mean adaptation quality over the filtered classes: for each stored
/// descriptor v with a tracked source image x, the dot product of v with the
/// l2-normalized current-extractor feature of x.
pub fn adaptation_quality<S: ImageSource>(
    memory: &FeatureMemory,
    extractor: &Extractor<f32>,
    stats: &ChannelStats,
    source: &S,
    class_filter: &[u32],
    batch_size: usize,
) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::Config("evaluation batch size must be positive".into()));
    }
    let mut vectors: Vec<&[f32]> = Vec::new();
    let mut image_indices: Vec<u32> = Vec::new();
    for &class in class_filter {
        let descriptors = memory.descriptors(class).ok_or_else(|| {
            Error::Consistency(format!("memory holds no class {class}"))
        })?;
        for d in descriptors {
            let index = d.source_index.ok_or_else(|| {
                Error::DiagnosticUnavailable(
                    "descriptor provenance not tracked; enable track_provenance_images".into(),
                )
            })?;
            vectors.push(&d.vector);
            image_indices.push(index);
        }
    }
    if vectors.is_empty() {
        return Err(Error::Evaluation(
            "adaptation quality over zero descriptors".into(),
        ));
    }
    let mut total = 0.0f64;
    for (chunk_at, chunk) in image_indices.chunks(batch_size).enumerate() {
        let x = gather_batch::<f32, _>(source, chunk, stats);
        let fresh = normalize_rows(extractor.features(&x));
        for (row, fresh_row) in fresh.rows().into_iter().enumerate() {
            let v = vectors[chunk_at * batch_size + row];
            total += v
                .iter()
                .zip(fresh_row)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>();
        }
    }
    Ok(total / vectors.len() as f64)
}

/// One evaluated point on the incremental accuracy curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub task: usize,
    pub classes_seen: usize,
    pub accuracy: f64,
}

/// Everything a run reports, serialized to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub curve: Vec<CurvePoint>,
    pub avg_inc_acc: f64,
    /// Adaptation quality of the previous task's classes, one entry per task
    /// from the second onward.
    pub omega_prev: Vec<f64>,
    /// Adaptation quality of the first task's classes, same cadence.
    pub omega_first: Vec<f64>,
    pub footprint: FootprintReport,
}

impl MetricsRecord {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("metrics serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("metrics parse: {e}")))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let body = self.to_json()?;
        atomic_write(path, |w| w.bytes(body.as_bytes()))
    }

    pub fn write_curve_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from("task_index,classes_seen,accuracy\n");
        for point in &self.curve {
            text.push_str(&format!(
                "{},{},{}\n",
                point.task, point.classes_seen, point.accuracy
            ));
        }
        atomic_write(path, |w| w.bytes(text.as_bytes()))
    }
}

/// Confusion matrix indexed by ascending class id; an independent cross-check
/// for accuracy computations.
pub fn confusion_matrix(
    truth: &[u32],
    predicted: &[u32],
    class_count: usize,
) -> Result<Array2<u64>> {
    if truth.len() != predicted.len() {
        return Err(Error::Consistency(format!(
            "{} labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut matrix = Array2::zeros((class_count, class_count));
    for (&t, &p) in truth.iter().zip(predicted) {
        if t as usize >= class_count || p as usize >= class_count {
            return Err(Error::Consistency(format!(
                "label {t} or prediction {p} outside {class_count} classes"
            )));
        }
        matrix[(t as usize, p as usize)] += 1;
    }
    Ok(matrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ImageShape, LabeledDataset};
    use crate::memory::{footprint, StoredDescriptor};
    use crate::model::identity_arch;
    use crate::real::normalize_in_place;
    use crate::rng::stream_rng;
    use ndarray::{arr2, Array1};
    use rand::Rng;

    /// 1x2x2 images whose flattened pixels point at distinct corners per class.
    fn corner_dataset(per_class: usize) -> LabeledDataset {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * per_class {
            let class = (i % 2) as u32;
            if class == 0 {
                pixels.extend_from_slice(&[255, 0, 0, 0]);
            } else {
                pixels.extend_from_slice(&[0, 0, 0, 255]);
            }
            labels.push(class);
        }
        let shape = ImageShape {
            channels: 1,
            height: 2,
            width: 2,
        };
        LabeledDataset::new(shape, pixels, labels, 2).unwrap()
    }

    fn identity_extractor(shape: ImageShape) -> Extractor<f32> {
        Extractor::new(shape, &identity_arch(shape), &mut stream_rng(0, "eval", 0)).unwrap()
    }

    #[test]
    fn constant_predictor_scores_class_share() {
        let data = corner_dataset(8);
        let extractor = identity_extractor(data.shape());
        // Zero weights and biases tie every score; lowest class id 0 wins.
        let clf = FeatureClassifier::from_parts(
            Array2::zeros((2, 4)),
            Array1::zeros(2),
            vec![0, 1],
            1.0,
        )
        .unwrap();
        let indices: Vec<u32> = (0..16).collect();
        let stats = ChannelStats::identity(1);
        let acc = evaluate_task(&clf, &extractor, &stats, &data, &indices, 5, 1).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn perfect_classifier_scores_one() {
        let data = corner_dataset(6);
        let extractor = identity_extractor(data.shape());
        let clf = FeatureClassifier::from_parts(
            arr2(&[[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]]),
            Array1::zeros(2),
            vec![0, 1],
            1.0,
        )
        .unwrap();
        let indices: Vec<u32> = (0..12).collect();
        let stats = ChannelStats::identity(1);
        let acc = evaluate_task(&clf, &extractor, &stats, &data, &indices, 4, 1).unwrap();
        assert_eq!(acc, 1.0);
        assert!(matches!(
            evaluate_task(&clf, &extractor, &stats, &data, &[], 4, 1).unwrap_err(),
            Error::Evaluation(_)
        ));
    }

    #[test]
    fn accuracy_matches_confusion_matrix_trace() {
        let data = corner_dataset(10);
        let extractor = identity_extractor(data.shape());
        // Deliberately imperfect: class 1 weights point at class 0 pixels too.
        let clf = FeatureClassifier::from_parts(
            arr2(&[[1.0, 0.0, 0.0, 0.0], [0.9, 0.0, 0.0, 0.5]]),
            Array1::zeros(2),
            vec![0, 1],
            1.0,
        )
        .unwrap();
        let indices: Vec<u32> = (0..20).collect();
        let stats = ChannelStats::identity(1);
        let acc = evaluate_task(&clf, &extractor, &stats, &data, &indices, 7, 1).unwrap();

        let x = gather_batch::<f32, _>(&data, &indices, &stats);
        let features = normalize_rows(extractor.features(&x));
        let predicted = clf.classify(features.view()).unwrap();
        let truth: Vec<u32> = indices.iter().map(|&i| data.label(i as usize)).collect();
        let matrix = confusion_matrix(&truth, &predicted, 2).unwrap();
        let trace: u64 = (0..2).map(|i| matrix[(i, i)]).sum();
        let total: u64 = matrix.iter().sum();
        assert_eq!(acc, trace as f64 / total as f64);
        assert_eq!(total, 20);
    }

    #[test]
    fn top_k_recovers_second_ranked_label() {
        let data = corner_dataset(4);
        let extractor = identity_extractor(data.shape());
        // Class-1 images score class 0 highest and class 1 second, so top-1
        // misses them while top-2 catches every row.
        let clf = FeatureClassifier::from_parts(
            arr2(&[
                [1.0, 0.0, 0.0, 0.8],
                [0.0, 0.0, 0.0, 0.5],
                [0.5, 0.0, 0.0, 0.0],
            ]),
            Array1::zeros(3),
            vec![0, 1, 2],
            1.0,
        )
        .unwrap();
        let indices: Vec<u32> = (0..8).collect();
        let stats = ChannelStats::identity(1);
        let top1 = evaluate_task(&clf, &extractor, &stats, &data, &indices, 3, 1).unwrap();
        let top2 = evaluate_task(&clf, &extractor, &stats, &data, &indices, 3, 2).unwrap();
        assert_eq!(top1, 0.5);
        assert_eq!(top2, 1.0);
        assert!(matches!(
            evaluate_task(&clf, &extractor, &stats, &data, &indices, 3, 0).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn head_predictor_maps_columns_to_class_ids() {
        let mut head = CosineHead::<f32>::new(2, 2, Some(1.0), &mut stream_rng(0, "hp", 0));
        let mut params = vec![0.0f32; head.param_count()];
        // Column 0 follows e0, column 1 follows e1 (row-major (dim, classes)).
        params[0] = 1.0;
        params[3] = 1.0;
        *params.last_mut().unwrap() = 1.0;
        head.write_params(&params).unwrap();
        let predictor = HeadPredictor {
            head: &head,
            class_layout: &[4, 9],
        };
        let features = arr2(&[[1.0f32, 0.0], [0.0, 1.0]]);
        assert_eq!(predictor.predict(features.view()).unwrap(), vec![4, 9]);
    }

    #[test]
    fn curve_average_is_plain_mean() {
        assert!((average_incremental_accuracy(&[0.9, 0.8, 0.7]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(average_incremental_accuracy(&[0.6]).unwrap(), 0.6);
        let forward = average_incremental_accuracy(&[0.9, 0.8, 0.7]).unwrap();
        let backward = average_incremental_accuracy(&[0.7, 0.8, 0.9]).unwrap();
        assert!((forward - backward).abs() < 1e-12);
        assert!(average_incremental_accuracy(&[]).is_err());
    }

    #[test]
    fn quality_is_one_right_after_storage() {
        let data = corner_dataset(5);
        let extractor = identity_extractor(data.shape());
        let stats = ChannelStats::identity(1);
        let indices: Vec<u32> = (0..10).collect();
        let x = gather_batch::<f32, _>(&data, &indices, &stats);
        let features = normalize_rows(extractor.features(&x));
        let labels: Vec<u32> = indices.iter().map(|&i| data.label(i as usize)).collect();
        let mut memory = FeatureMemory::new(4, 8);
        memory
            .store_task_features(features.view(), &labels, Some(&indices))
            .unwrap();
        let omega =
            adaptation_quality(&memory, &extractor, &stats, &data, &[0, 1], 6).unwrap();
        assert!((omega - 1.0).abs() < 1e-5, "omega {omega}");
    }

    #[test]
    fn quality_requires_provenance() {
        let data = corner_dataset(2);
        let extractor = identity_extractor(data.shape());
        let mut memory = FeatureMemory::new(4, 8);
        memory
            .insert_class(
                0,
                vec![StoredDescriptor {
                    vector: vec![1.0, 0.0, 0.0, 0.0],
                    adapt_count: 0,
                    source_index: None,
                }],
            )
            .unwrap();
        let err = adaptation_quality(
            &memory,
            &extractor,
            &ChannelStats::identity(1),
            &data,
            &[0],
            4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DiagnosticUnavailable(_)));
    }

    #[test]
    fn random_descriptors_score_near_zero_quality() {
        // 100 random unit descriptors against arbitrary images: the mean dot
        // product concentrates near zero in 64 dimensions.
        let mut rng = stream_rng(3, "mc", 0);
        let shape = ImageShape {
            channels: 1,
            height: 8,
            width: 8,
        };
        let mut pixels = Vec::new();
        for _ in 0..100 * 64 {
            pixels.push(rng.gen_range(0..=255u8));
        }
        let labels = vec![0u32; 100];
        let data = LabeledDataset::new(shape, pixels, labels, 1).unwrap();
        let extractor = identity_extractor(shape);
        let mut descriptors = Vec::new();
        for i in 0..100u32 {
            let mut v: Vec<f32> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            normalize_in_place(&mut v);
            descriptors.push(StoredDescriptor {
                vector: v,
                adapt_count: 0,
                source_index: Some(i),
            });
        }
        let mut memory = FeatureMemory::new(64, 128);
        memory.insert_class(0, descriptors).unwrap();
        let omega = adaptation_quality(
            &memory,
            &extractor,
            &ChannelStats::identity(1),
            &data,
            &[0],
            32,
        )
        .unwrap();
        assert!(omega.abs() < 0.3, "omega {omega}");
    }

    #[test]
    fn metrics_round_trip_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let memory = FeatureMemory::new(4, 8);
        let record = MetricsRecord {
            curve: vec![
                CurvePoint {
                    task: 1,
                    classes_seen: 2,
                    accuracy: 0.975,
                },
                CurvePoint {
                    task: 2,
                    classes_seen: 4,
                    accuracy: 0.9,
                },
            ],
            avg_inc_acc: 0.9375,
            omega_prev: vec![0.95],
            omega_first: vec![0.95],
            footprint: footprint(&memory, None),
        };
        let json_path = dir.path().join("metrics.json");
        record.write_json(&json_path).unwrap();
        let text = std::fs::read_to_string(&json_path).unwrap();
        assert_eq!(MetricsRecord::from_json(&text).unwrap(), record);
        for key in ["curve", "avg_inc_acc", "omega_prev", "omega_first", "footprint"] {
            assert!(text.contains(key), "metrics.json missing {key}");
        }

        let csv_path = dir.path().join("curve.csv");
        record.write_curve_csv(&csv_path).unwrap();
        let csv = std::fs::read_to_string(&csv_path).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "task_index,classes_seen,accuracy");
        assert_eq!(lines[1], "1,2,0.975");
        assert_eq!(lines[2], "2,4,0.9");
    }
}

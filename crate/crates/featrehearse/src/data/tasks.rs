//! Class-incremental task construction.
//!
//! The class set is shuffled once under the run seed and dealt into tasks of
//! `classes_per_task` classes. Task t trains on the examples of its own
//! classes and is evaluated on the test examples of every class seen so far.

use super::dataset::{ImageSource, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use rand::seq::SliceRandom;

/// One task: its class subset plus index lists into the train/test sets.
#[derive(Debug, Clone)]
pub struct TaskSplit {
    /// 1-based task index.
    pub task_index: usize,
    /// Classes introduced by this task, in presentation order.
    pub classes: Vec<u32>,
    /// Train-set rows whose label belongs to this task.
    pub train_indices: Vec<u32>,
    /// Test-set rows for all classes seen up to and including this task.
    pub test_indices_cumulative: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct TaskStream {
    pub class_order: Vec<u32>,
    pub tasks: Vec<TaskSplit>,
}

impl TaskStream {
    pub fn classes_seen(&self, task_index: usize) -> usize {
        self.tasks[..task_index]
            .iter()
            .map(|t| t.classes.len())
            .sum()
    }
}

/// Splits train/test datasets into an incremental task stream.
pub fn split_tasks<S: ImageSource>(
    train: &S,
    test: &S,
    classes_per_task: usize,
    seed: u64,
) -> Result<TaskStream> {
    let k = train.class_count();
    if test.class_count() != k {
        return Err(Error::Consistency(format!(
            "train set has {k} classes, test set has {}",
            test.class_count()
        )));
    }
    if k == 0 {
        return Err(Error::EmptyDataset("datasets declare zero classes".into()));
    }
    if classes_per_task == 0 || classes_per_task as u32 > k {
        return Err(Error::Config(format!(
            "classes_per_task must be in 1..={k}, got {classes_per_task}"
        )));
    }

    let mut class_order: Vec<u32> = (0..k).collect();
    class_order.shuffle(&mut stream_rng(seed, "class_order", 0));

    let mut tasks = Vec::new();
    let mut seen = vec![false; k as usize];
    for (i, chunk) in class_order.chunks(classes_per_task).enumerate() {
        for &c in chunk {
            seen[c as usize] = true;
        }
        let member = |l: u32| chunk.contains(&l);
        let train_indices: Vec<u32> = (0..train.len() as u32)
            .filter(|&i| member(train.label(i as usize)))
            .collect();
        if train_indices.is_empty() {
            return Err(Error::EmptyClass(format!(
                "task {} has no training examples for classes {:?}",
                i + 1,
                chunk
            )));
        }
        let test_indices_cumulative: Vec<u32> = (0..test.len() as u32)
            .filter(|&i| seen[test.label(i as usize) as usize])
            .collect();
        tasks.push(TaskSplit {
            task_index: i + 1,
            classes: chunk.to_vec(),
            train_indices,
            test_indices_cumulative,
        });
    }
    Ok(TaskStream { class_order, tasks })
}

/// Splits a dataset into (kept, held_out) with `fraction` of each class held
/// out, at least one example per class kept on both sides when possible.
pub fn stratified_holdout(
    ds: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(0.0..1.0).contains(&fraction) || fraction <= 0.0 {
        return Err(Error::Config(format!(
            "holdout fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut rng = stream_rng(seed, "holdout", 0);
    let mut kept = Vec::new();
    let mut held = Vec::new();
    for c in 0..ds.class_count() {
        let mut rows: Vec<u32> = (0..ds.len() as u32)
            .filter(|&i| ds.label(i as usize) == c)
            .collect();
        if rows.is_empty() {
            continue;
        }
        rows.shuffle(&mut rng);
        let mut take = (rows.len() as f64 * fraction).round() as usize;
        take = take.min(rows.len() - 1).max(usize::from(rows.len() > 1));
        held.extend_from_slice(&rows[..take]);
        kept.extend_from_slice(&rows[take..]);
    }
    kept.sort_unstable();
    held.sort_unstable();
    if kept.is_empty() || held.is_empty() {
        return Err(Error::EmptyDataset(
            "holdout left one side of the split empty".into(),
        ));
    }
    Ok((ds.subset(&kept)?, ds.subset(&held)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::ImageShape;

    fn toy(labels: Vec<u32>, k: u32) -> LabeledDataset {
        let shape = ImageShape {
            channels: 1,
            height: 1,
            width: 1,
        };
        let pixels = vec![0u8; labels.len()];
        LabeledDataset::new(shape, pixels, labels, k).unwrap()
    }

    #[test]
    fn covers_all_classes_without_overlap() {
        let train = toy((0..10).cycle().take(60).collect(), 10);
        let test = toy((0..10).cycle().take(20).collect(), 10);
        let stream = split_tasks(&train, &test, 2, 11).unwrap();
        assert_eq!(stream.tasks.len(), 5);
        let mut all: Vec<u32> = stream.tasks.iter().flat_map(|t| t.classes.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        // Train rows never repeat across tasks.
        let mut rows: Vec<u32> = stream
            .tasks
            .iter()
            .flat_map(|t| t.train_indices.clone())
            .collect();
        let total = rows.len();
        rows.sort_unstable();
        rows.dedup();
        assert_eq!(rows.len(), total);
    }

    #[test]
    fn cumulative_test_grows_to_full_set() {
        let train = toy((0..6).cycle().take(30).collect(), 6);
        let test = toy((0..6).cycle().take(12).collect(), 6);
        let stream = split_tasks(&train, &test, 2, 3).unwrap();
        let sizes: Vec<usize> = stream
            .tasks
            .iter()
            .map(|t| t.test_indices_cumulative.len())
            .collect();
        assert_eq!(sizes, vec![4, 8, 12]);
    }

    #[test]
    fn uneven_final_task() {
        let train = toy((0..5).cycle().take(25).collect(), 5);
        let test = toy((0..5).cycle().take(10).collect(), 5);
        let stream = split_tasks(&train, &test, 2, 0).unwrap();
        assert_eq!(stream.tasks.len(), 3);
        assert_eq!(stream.tasks[2].classes.len(), 1);
    }

    #[test]
    fn seed_changes_order_and_is_stable() {
        let train = toy((0..10).cycle().take(40).collect(), 10);
        let test = toy((0..10).cycle().take(20).collect(), 10);
        let a = split_tasks(&train, &test, 2, 1).unwrap();
        let b = split_tasks(&train, &test, 2, 1).unwrap();
        let c = split_tasks(&train, &test, 2, 2).unwrap();
        assert_eq!(a.class_order, b.class_order);
        assert_ne!(a.class_order, c.class_order);
    }

    #[test]
    fn m_larger_than_k_is_config_error() {
        let train = toy(vec![0, 1], 2);
        let test = toy(vec![0, 1], 2);
        assert!(matches!(
            split_tasks(&train, &test, 3, 0).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn holdout_is_stratified_and_disjoint() {
        let ds = toy((0..4).cycle().take(40).collect(), 4);
        let (kept, held) = stratified_holdout(&ds, 0.2, 5).unwrap();
        assert_eq!(kept.len() + held.len(), 40);
        for c in 0..4u32 {
            assert_eq!(held.labels().iter().filter(|&&l| l == c).count(), 2);
            assert_eq!(kept.labels().iter().filter(|&&l| l == c).count(), 8);
        }
    }
}

//! Deterministic mini-batch index generation.

use super::tasks::TaskSplit;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Shuffles `items` under `seed` and splits them into chunks of `batch_size`
/// (last chunk may be short). The order is a pure function of the arguments.
pub fn shuffled_chunks<T: Clone>(items: &[T], batch_size: usize, seed: u64) -> Result<Vec<Vec<T>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<T> = items.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Epoch batches over a task's training rows.
pub fn batches(split: &TaskSplit, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<u32>>> {
    shuffled_chunks(&split.train_indices, batch_size, epoch_seed)
}

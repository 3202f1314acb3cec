//! Greedy herding selection.
//!
//! Picks examples whose running mean tracks the class mean: step k selects
//! the candidate x minimizing || mu - (x + sum of already selected) / k ||.
//! Accumulation runs in f64 regardless of the descriptor precision so the
//! selection order is stable. Ties (exact equality of the distance) go to
//! the lowest candidate index, and the first L' selections for a smaller
//! budget L' are always a prefix of the selections for a larger one.

use crate::error::{Error, Result};
use ndarray::ArrayView2;

/// Returns the indices of `count` selected rows, in selection order. When
/// `count` exceeds the number of rows, every row is returned.
pub fn herding_select(features: ArrayView2<f32>, count: usize) -> Result<Vec<usize>> {
    let n = features.nrows();
    let d = features.ncols();
    if n == 0 {
        return Err(Error::EmptyClass(
            "herding invoked on a class with no feature rows".into(),
        ));
    }
    let take = count.min(n);

    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| features.row(i).iter().map(|&v| v as f64).collect())
        .collect();
    let mut mean = vec![0.0f64; d];
    for row in &rows {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let mut selected = Vec::with_capacity(take);
    let mut used = vec![false; n];
    let mut sum = vec![0.0f64; d];
    for k in 1..=take {
        let mut best = f64::INFINITY;
        let mut best_at = usize::MAX;
        for (i, row) in rows.iter().enumerate() {
            if used[i] {
                continue;
            }
            let mut dist = 0.0f64;
            for j in 0..d {
                let diff = mean[j] - (sum[j] + row[j]) / k as f64;
                dist += diff * diff;
            }
            if dist < best {
                best = dist;
                best_at = i;
            }
        }
        used[best_at] = true;
        for (s, &v) in sum.iter_mut().zip(&rows[best_at]) {
            *s += v;
        }
        selected.push(best_at);
    }
    Ok(selected)
}

//! Feature-space adaptation: learning the map from the previous extractor's
//! descriptor space into the current one, then pushing the rehearsal memory
//! through it.
//!
//! Training pairs come exclusively from the current task's images: each image
//! is run through the frozen previous extractor (giving v_old) and the
//! freshly trained one (giving v_new). The adapter minimizes
//! alpha * (1 - cos(adapter(v_old), v_new)) plus the classification loss of
//! the adapted descriptor under the current scoring head, whose weights stay
//! frozen throughout.

use crate::data::{gather_batch, ChannelStats, ImageSource};
use crate::error::{Error, Result};
use crate::losses::{bce_with_logits, grad_fd_current, loss_fd, sigmoid};
use crate::memory::FeatureMemory;
use crate::model::{normalize_rows, AdapterNetwork, CosineHead, Extractor, Sgd, SgdConfig};
use crate::real::Real;
use crate::rng::stream_seed;
use ndarray::{Array2, Axis};

/// Aligned descriptor pairs (rows normalized to unit length) plus labels.
#[derive(Debug, Clone)]
pub struct FeaturePairSet {
    pub old: Array2<f32>,
    pub new: Array2<f32>,
    pub labels: Vec<u32>,
}

impl FeaturePairSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Extracts both descriptor views of the given rows.
pub fn build_pairs<S: ImageSource>(
    previous: &Extractor<f32>,
    current: &Extractor<f32>,
    src: &S,
    indices: &[u32],
    stats: &ChannelStats,
    batch_size: usize,
) -> Result<FeaturePairSet> {
    if previous.output_dim() != current.output_dim() {
        return Err(Error::Dimension(format!(
            "extractor descriptor sizes differ: {} vs {}",
            previous.output_dim(),
            current.output_dim()
        )));
    }
    if indices.is_empty() {
        return Err(Error::EmptyDataset(
            "no rows given for adaptation pairs".into(),
        ));
    }
    let d = current.output_dim();
    let mut old = Array2::zeros((indices.len(), d));
    let mut new = Array2::zeros((indices.len(), d));
    let mut labels = Vec::with_capacity(indices.len());
    let mut at = 0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let x = gather_batch::<f32, _>(src, chunk, stats);
        let fo = normalize_rows(previous.features(&x));
        let fn_ = normalize_rows(current.features(&x));
        old.slice_mut(ndarray::s![at..at + chunk.len(), ..]).assign(&fo);
        new.slice_mut(ndarray::s![at..at + chunk.len(), ..]).assign(&fn_);
        for &i in chunk {
            labels.push(src.label(i as usize));
        }
        at += chunk.len();
    }
    Ok(FeaturePairSet { old, new, labels })
}

/// Mean adapter objective over a batch:
/// alpha * (1 - cos(adapter(old), new)) + BCE(head(adapter(old)), one-hot).
/// `target_cols` maps each row to its head column. Head parameters receive
/// no gradient (the head acts as a frozen critic).
pub fn adapter_loss<F: Real>(
    adapter: &AdapterNetwork<F>,
    head: &CosineHead<F>,
    old: &Array2<F>,
    new: &Array2<F>,
    target_cols: &[usize],
    alpha: f64,
) -> Result<F> {
    adapter_terms(adapter, head, old, new, target_cols, alpha, false)
        .map(|(loss, _, _)| loss)
}

/// Loss plus gradients for every adapter parameter.
pub fn adapter_loss_grads<F: Real>(
    adapter: &AdapterNetwork<F>,
    head: &CosineHead<F>,
    old: &Array2<F>,
    new: &Array2<F>,
    target_cols: &[usize],
    alpha: f64,
) -> Result<(F, Vec<F>)> {
    adapter_terms(adapter, head, old, new, target_cols, alpha, true)
        .map(|(loss, _, grads)| (loss, grads.expect("grads requested")))
}

/// Mean similarity term alone (diagnostic).
pub fn adapter_similarity<F: Real>(
    adapter: &AdapterNetwork<F>,
    old: &Array2<F>,
    new: &Array2<F>,
) -> Result<F> {
    if old.dim() != new.dim() {
        return Err(Error::Dimension(format!(
            "pair matrices {:?} vs {:?}",
            old.dim(),
            new.dim()
        )));
    }
    let mapped = adapter.forward(old);
    let mut sim = F::zero();
    for (m, n) in mapped.axis_iter(Axis(0)).zip(new.axis_iter(Axis(0))) {
        sim += loss_fd(m, n)?;
    }
    Ok(sim / F::from_f64(old.nrows() as f64))
}

fn adapter_terms<F: Real>(
    adapter: &AdapterNetwork<F>,
    head: &CosineHead<F>,
    old: &Array2<F>,
    new: &Array2<F>,
    target_cols: &[usize],
    alpha: f64,
    want_grads: bool,
) -> Result<(F, F, Option<Vec<F>>)> {
    let n = old.nrows();
    if n == 0 {
        return Err(Error::EmptyDataset("empty adapter batch".into()));
    }
    if new.dim() != old.dim() || target_cols.len() != n {
        return Err(Error::Dimension(format!(
            "adapter batch: old {:?}, new {:?}, {} targets",
            old.dim(),
            new.dim(),
            target_cols.len()
        )));
    }
    if old.ncols() != adapter.dim() {
        return Err(Error::Dimension(format!(
            "{}-dim pairs into a {}-dim adapter",
            old.ncols(),
            adapter.dim()
        )));
    }
    if let Some(&bad) = target_cols.iter().find(|&&c| c >= head.classes()) {
        return Err(Error::Consistency(format!(
            "target column {bad} outside the head's {} classes",
            head.classes()
        )));
    }
    let inv_n = F::one() / F::from_f64(n as f64);
    let al = F::from_f64(alpha);

    let (mapped, cache) = adapter.forward_cached(old);
    let mut grad_mapped = want_grads.then(|| Array2::<F>::zeros(mapped.dim()));

    // Similarity term.
    let mut sim = F::zero();
    for (row, nrow) in mapped.axis_iter(Axis(0)).zip(new.axis_iter(Axis(0))) {
        sim += loss_fd(row, nrow)?;
    }
    if let Some(g) = grad_mapped.as_mut() {
        for i in 0..n {
            let gr = grad_fd_current(mapped.row(i), new.row(i));
            g.row_mut(i).assign(&gr.map(|&v| v * al * inv_n));
        }
    }
    sim = sim * inv_n;

    // Classification term under the frozen head.
    let (scores, head_cache) = head.forward_cached(&mapped);
    let mut ce = F::zero();
    for (i, &col) in target_cols.iter().enumerate() {
        for k in 0..head.classes() {
            let y = if k == col { F::one() } else { F::zero() };
            ce += bce_with_logits(scores[[i, k]], y);
        }
    }
    ce = ce * inv_n;

    let loss = al * sim + ce;
    if !want_grads {
        return Ok((loss, sim, None));
    }

    let mut grad_scores = Array2::<F>::zeros(scores.dim());
    for (i, &col) in target_cols.iter().enumerate() {
        for k in 0..head.classes() {
            let y = if k == col { F::one() } else { F::zero() };
            grad_scores[[i, k]] = (sigmoid(scores[[i, k]]) - y) * inv_n;
        }
    }
    let head_grads = head.backward(&head_cache, &grad_scores);
    let mut grad_out = grad_mapped.unwrap();
    grad_out += &head_grads.features; // head weight/eta grads are discarded

    let grads = adapter.backward(&cache, &grad_out);
    Ok((loss, sim, Some(grads)))
}

#[derive(Debug, Clone)]
pub struct AdapterTrainConfig {
    pub alpha: f64,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fraction of pairs held out to report generalization of the fit.
    pub holdout_fraction: f64,
}

impl AdapterTrainConfig {
    /// Defaults for descriptor dimension `d`: hidden size 16d, 40 epochs of
    /// momentum SGD at 0.01, batches of 128, 10% holdout.
    pub fn for_dim(d: usize) -> Self {
        Self {
            alpha: 100.0,
            hidden_dim: 16 * d,
            epochs: 40,
            batch_size: 128,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdapterReport {
    pub train_similarity: f32,
    pub holdout_similarity: f32,
    pub final_loss: f32,
}

/// Trains an adapter on drift pairs. `target_cols` maps labels to head
/// columns; `seed` drives init, the train/holdout split and batch order.
pub fn train_adapter(
    pairs: &FeaturePairSet,
    head: &CosineHead<f32>,
    target_cols: &[usize],
    cfg: &AdapterTrainConfig,
    seed: u64,
) -> Result<(AdapterNetwork<f32>, AdapterReport)> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no adaptation pairs".into()));
    }
    if target_cols.len() != pairs.len() {
        return Err(Error::Consistency(format!(
            "{} target columns for {} pairs",
            target_cols.len(),
            pairs.len()
        )));
    }
    if !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(Error::Config(format!(
            "adapter holdout fraction must be in [0, 1), got {}",
            cfg.holdout_fraction
        )));
    }
    let d = pairs.old.ncols();
    let mut adapter = AdapterNetwork::<f32>::new_near_identity(
        d,
        cfg.hidden_dim,
        &mut crate::rng::stream_rng(seed, "adapter/init", 0),
    );

    // Deterministic holdout split.
    let all: Vec<u32> = (0..pairs.len() as u32).collect();
    let shuffled = crate::data::shuffled_chunks(&all, pairs.len(), stream_seed(seed, "adapter/holdout", 0))?
        .pop()
        .unwrap();
    let held = ((pairs.len() as f64 * cfg.holdout_fraction) as usize).min(pairs.len() - 1);
    let (holdout_rows, train_rows) = shuffled.split_at(held);

    let take = |rows: &[u32]| -> (Array2<f32>, Array2<f32>, Vec<usize>) {
        let mut o = Array2::zeros((rows.len(), d));
        let mut nw = Array2::zeros((rows.len(), d));
        let mut t = Vec::with_capacity(rows.len());
        for (i, &r) in rows.iter().enumerate() {
            o.row_mut(i).assign(&pairs.old.row(r as usize));
            nw.row_mut(i).assign(&pairs.new.row(r as usize));
            t.push(target_cols[r as usize]);
        }
        (o, nw, t)
    };
    let (train_old, train_new, train_t) = take(train_rows);
    let (hold_old, hold_new, _) = take(holdout_rows);

    let sgd_cfg = SgdConfig {
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        decay_milestones: vec![],
        decay_factor: 1.0,
    };
    let mut opt = Sgd::new(sgd_cfg, adapter.param_count());
    let mut params = adapter.read_params();
    let mut final_loss = 0.0f32;
    let rows: Vec<u32> = (0..train_rows.len() as u32).collect();
    for epoch in 0..cfg.epochs {
        let batches = crate::data::shuffled_chunks(
            &rows,
            cfg.batch_size,
            stream_seed(seed, "adapter/batch", epoch as u64),
        )?;
        let mut epoch_loss = 0.0f64;
        for batch in &batches {
            let mut bo = Array2::zeros((batch.len(), d));
            let mut bn = Array2::zeros((batch.len(), d));
            let mut bt = Vec::with_capacity(batch.len());
            for (i, &r) in batch.iter().enumerate() {
                bo.row_mut(i).assign(&train_old.row(r as usize));
                bn.row_mut(i).assign(&train_new.row(r as usize));
                bt.push(train_t[r as usize]);
            }
            let (loss, grads) = adapter_loss_grads(&adapter, head, &bo, &bn, &bt, cfg.alpha)?;
            opt.step(&mut params, &grads, epoch)?;
            adapter.write_params(&params)?;
            epoch_loss += loss as f64 * batch.len() as f64;
        }
        final_loss = (epoch_loss / train_rows.len() as f64) as f32;
    }

    let train_similarity = adapter_similarity(&adapter, &train_old, &train_new)?;
    let holdout_similarity = if hold_old.nrows() > 0 {
        adapter_similarity(&adapter, &hold_old, &hold_new)?
    } else {
        train_similarity
    };
    Ok((
        adapter,
        AdapterReport {
            train_similarity,
            holdout_similarity,
            final_loss,
        },
    ))
}

/// Pushes every stored descriptor through the adapter, renormalizes, and
/// bumps each descriptor's adapt count.
pub fn adapt_memory(memory: &mut FeatureMemory, adapter: &AdapterNetwork<f32>) -> Result<()> {
    if memory.dim() != adapter.dim() {
        return Err(Error::Dimension(format!(
            "{}-dim memory pushed through a {}-dim adapter",
            memory.dim(),
            adapter.dim()
        )));
    }
    let dim = memory.dim();
    for (_, descs) in memory.iter_mut() {
        let mut m = Array2::zeros((descs.len(), dim));
        for (i, d) in descs.iter().enumerate() {
            for (j, &v) in d.vector.iter().enumerate() {
                m[[i, j]] = v;
            }
        }
        let mapped = normalize_rows(adapter.forward(&m));
        for (i, d) in descs.iter_mut().enumerate() {
            d.vector = mapped.row(i).to_vec();
            d.adapt_count += 1;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ImageShape, LabeledDataset};
    use crate::memory::StoredDescriptor;
    use crate::model::{identity_arch, Dense};
    use crate::rng::stream_rng;
    use ndarray::Array1;
    use rand::Rng;

    #[test]
    fn build_pairs_with_identity_extractors_yields_equal_sides() {
        let shape = ImageShape {
            channels: 1,
            height: 2,
            width: 2,
        };
        let ds = LabeledDataset::new(
            shape,
            vec![10, 20, 30, 40, 50, 60, 70, 80],
            vec![0, 1],
            2,
        )
        .unwrap();
        let mut rng = stream_rng(0, "x", 0);
        let ex1 = Extractor::<f32>::new(shape, &identity_arch(shape), &mut rng).unwrap();
        let ex2 = Extractor::<f32>::new(shape, &identity_arch(shape), &mut rng).unwrap();
        let stats = ChannelStats::identity(1);
        let pairs = build_pairs(&ex1, &ex2, &ds, &[0, 1], &stats, 8).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs.old, pairs.new);
        assert_eq!(pairs.labels, vec![0, 1]);
        // Rows are unit length.
        for row in pairs.old.axis_iter(Axis(0)) {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let mut rng = stream_rng(1, "afd", 0);
        let d = 5;
        let mut adapter = AdapterNetwork::<f64>::new(d, 9, &mut rng);
        let head = CosineHead::<f64>::new(d, 3, Some(1.3), &mut rng);
        let old = Array2::from_shape_fn((6, d), |_| rng.gen_range(-1.0..1.0));
        let new = Array2::from_shape_fn((6, d), |_| rng.gen_range(-1.0..1.0));
        let cols = vec![0usize, 1, 2, 0, 1, 2];
        let (loss, grads) =
            adapter_loss_grads(&adapter, &head, &old, &new, &cols, 100.0).unwrap();
        assert!(loss.is_finite());
        let base = adapter.read_params();
        let eps = 1e-6;
        for at in [0usize, 7, 44, 80, base.len() - 1] {
            let mut p = base.clone();
            p[at] += eps;
            adapter.write_params(&p).unwrap();
            let up = adapter_loss(&adapter, &head, &old, &new, &cols, 100.0).unwrap();
            p[at] -= 2.0 * eps;
            adapter.write_params(&p).unwrap();
            let dn = adapter_loss(&adapter, &head, &old, &new, &cols, 100.0).unwrap();
            let fd = (up - dn) / (2.0 * eps);
            let denom = fd.abs().max(grads[at].abs()).max(1e-8);
            assert!(
                (fd - grads[at]).abs() / denom < 1e-4,
                "param {at}: fd {fd} vs {}",
                grads[at]
            );
        }
    }

    #[test]
    fn self_adaptation_reaches_low_similarity_loss() {
        // Pairs where both sides agree (no drift): two unit clusters, head
        // aligned with the cluster directions. The trained adapter should
        // reproduce its input closely.
        let mut rng = stream_rng(2, "self", 0);
        let d = 16;
        let n = 300;
        let mut old = Array2::<f32>::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            let center = if class == 0 { 0 } else { 1 };
            for j in 0..d {
                let base = if j == center { 1.0 } else { 0.0 };
                old[[i, j]] = base + rng.gen_range(-0.2..0.2f32);
            }
            labels.push(class as u32);
        }
        let old = normalize_rows(old);
        let pairs = FeaturePairSet {
            old: old.clone(),
            new: old,
            labels: labels.clone(),
        };
        let mut head = CosineHead::<f32>::new(d, 2, Some(10.0), &mut rng);
        // Weight matrix is (d, 2) row-major: column 0 <- e0, column 1 <- e1.
        let mut w = vec![0.0f32; head.param_count()];
        w[0] = 1.0;
        w[3] = 1.0;
        *w.last_mut().unwrap() = 10.0;
        head.write_params(&w).unwrap();
        let cols: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let cfg = AdapterTrainConfig::for_dim(d);
        let (_, report) = train_adapter(&pairs, &head, &cols, &cfg, 7).unwrap();
        assert!(
            report.holdout_similarity <= 0.05,
            "holdout similarity loss {} too high",
            report.holdout_similarity
        );
    }

    #[test]
    fn adapt_memory_renormalizes_and_counts() {
        let mut mem = FeatureMemory::new(3, 4);
        mem.insert_class(
            1,
            vec![StoredDescriptor {
                vector: vec![0.6, 0.8, 0.0],
                adapt_count: 2,
                source_index: Some(5),
            }],
        )
        .unwrap();
        // Adapter that doubles its input (identity weights scaled by 2 on
        // the last layer); renormalization should cancel the scale.
        let eye = |d: usize, s: f32| Dense {
            weight: Array2::from_shape_fn((d, d), |(i, j)| if i == j { s } else { 0.0 }),
            bias: Array1::zeros(d),
        };
        let adapter = AdapterNetwork {
            l1: eye(3, 1.0),
            l2: eye(3, 1.0),
            l3: eye(3, 2.0),
        };
        adapt_memory(&mut mem, &adapter).unwrap();
        let d = &mem.descriptors(1).unwrap()[0];
        assert!((d.vector[0] - 0.6).abs() < 1e-6);
        assert!((d.vector[1] - 0.8).abs() < 1e-6);
        assert_eq!(d.adapt_count, 3);
        assert_eq!(d.source_index, Some(5));
    }
}

//! Run orchestration: the class-incremental loop tying together data,
//! network, rehearsal memory, adaptation, classifier and evaluation.
//!
//! Each task runs through a fixed procedure:
//!
//! 1. (t >= 2) freeze a copy of the network and widen the scoring head by
//!    the task's classes;
//! 2. train the network on the task's images: classification alone on the
//!    first task, plus distillation and feature-drift control against the
//!    frozen copy afterwards; stored exemplar images are replayed in the
//!    batches when the hybrid image store is enabled;
//! 3. (t >= 2, with feature memory) fit the adapter on old/new descriptor
//!    pairs of the current task's images, push every stored descriptor
//!    through it, then re-extract exact descriptors for exemplar-backed
//!    rows;
//! 4. herd and store the new task's descriptors (and exemplar images);
//! 5. train the balanced feature classifier over the stored pool;
//! 6. evaluate on the cumulative test set and write artifacts.
//!
//! Training never touches a past task's images again. The one deliberate
//! exception is the adaptation-quality diagnostic, which re-reads stored
//! descriptors' source images to measure how close the adapted memory sits
//! to true current-extractor features; it runs only when provenance
//! tracking is switched on and never feeds back into training.

mod checkpoint;
mod config;

pub use checkpoint::TaskCheckpoint;
pub use config::{ClassifierMode, DatasetChoice, RunConfig};

use crate::adaptation::{adapt_memory, build_pairs, train_adapter, AdapterReport};
use crate::binio::atomic_write;
use crate::classifier::{train_feature_classifier, train_on_pool, FeatureClassifier};
use crate::data::{
    augment_batch, gather_batch, load_cifar_batches, load_idx_dataset, normalize_batch,
    split_tasks, synthetic_digits, Augment, ChannelStats, ImageSource, LabeledDataset,
    SyntheticSpec, TaskSplit, TaskStream,
};
use crate::data::shuffled_chunks;
use crate::error::{Error, Result};
use crate::evaluation::{
    adaptation_quality, average_incremental_accuracy, evaluate_task, CurvePoint, HeadPredictor,
    MetricsRecord,
};
use crate::memory::{
    footprint, herding_select, read_exemplar_snapshot, read_memory_snapshot,
    write_exemplar_snapshot, write_memory_snapshot, ExemplarImage, FeatureMemory,
    ImageExemplarStore,
};
use crate::model::{
    default_cnn, normalize_rows, one_hot, AdapterNetwork, CosineHead, Extractor, Network, Sgd,
};
use crate::rng::{stream_rng, stream_seed};
use ndarray::{s, Array2, Array4};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Batch size for inference-only passes (feature extraction, evaluation).
const EVAL_BATCH: usize = 256;

/// Mutable state carried across tasks; returned to callers for inspection.
#[derive(Debug, Clone)]
pub struct RunState {
    pub network: Network<f32>,
    /// Class id carried by each head column.
    pub class_layout: Vec<u32>,
    /// Normalization statistics, frozen on the first task's training rows.
    pub stats: ChannelStats,
    pub memory: FeatureMemory,
    pub exemplars: ImageExemplarStore,
    pub classifier: Option<FeatureClassifier>,
    /// Adapter fitted on the most recent incremental task.
    pub adapter: Option<AdapterNetwork<f32>>,
    pub curve: Vec<CurvePoint>,
    pub omega_prev: Vec<f64>,
    pub omega_first: Vec<f64>,
    pub adapter_reports: Vec<AdapterReport>,
}

impl RunState {
    /// Metrics snapshot of everything accumulated so far.
    pub fn metrics(&self, cfg: &RunConfig) -> MetricsRecord {
        let accs: Vec<f64> = self.curve.iter().map(|p| p.accuracy).collect();
        MetricsRecord {
            curve: self.curve.clone(),
            avg_inc_acc: average_incremental_accuracy(&accs).unwrap_or(0.0),
            omega_prev: self.omega_prev.clone(),
            omega_first: self.omega_first.clone(),
            footprint: footprint(
                &self.memory,
                (cfg.image_exemplars_per_class > 0).then_some(&self.exemplars),
            ),
        }
    }
}

/// Completed run: final metrics plus the state that produced them.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: MetricsRecord,
    /// Shuffled class order the tasks were dealt from.
    pub class_order: Vec<u32>,
    pub state: RunState,
}

/// One network-training example: a dataset row or a stored exemplar image.
#[derive(Debug, Clone, Copy)]
enum TrainItem {
    Data(u32),
    Exemplar { class: u32, slot: usize },
}

/// Loads the configured dataset, applying the per-class caps.
pub fn load_dataset(
    cfg: &RunConfig,
    data_root: &Path,
) -> Result<(LabeledDataset, LabeledDataset)> {
    match cfg.dataset {
        DatasetChoice::Synthetic => {
            let spec = SyntheticSpec {
                train_per_class: if cfg.train_cap_per_class == 0 {
                    SyntheticSpec::default().train_per_class
                } else {
                    cfg.train_cap_per_class
                },
                test_per_class: if cfg.test_cap_per_class == 0 {
                    SyntheticSpec::default().test_per_class
                } else {
                    cfg.test_cap_per_class
                },
                ..SyntheticSpec::default()
            };
            synthetic_digits(&spec)
        }
        DatasetChoice::Mnist => {
            let train = load_idx_dataset(
                &data_root.join("train-images-idx3-ubyte"),
                &data_root.join("train-labels-idx1-ubyte"),
            )?;
            let test = load_idx_dataset(
                &data_root.join("t10k-images-idx3-ubyte"),
                &data_root.join("t10k-labels-idx1-ubyte"),
            )?;
            Ok((
                cap_per_class(&train, cfg.train_cap_per_class)?,
                cap_per_class(&test, cfg.test_cap_per_class)?,
            ))
        }
        DatasetChoice::Cifar10 => {
            let batches: Vec<PathBuf> = (1..=5)
                .map(|i| data_root.join(format!("data_batch_{i}.bin")))
                .collect();
            let train = load_cifar_batches(&batches)?;
            let test = load_cifar_batches(&[data_root.join("test_batch.bin")])?;
            Ok((
                cap_per_class(&train, cfg.train_cap_per_class)?,
                cap_per_class(&test, cfg.test_cap_per_class)?,
            ))
        }
    }
}

/// Keeps the first `cap` rows of every class, in dataset order.
fn cap_per_class(ds: &LabeledDataset, cap: usize) -> Result<LabeledDataset> {
    if cap == 0 {
        return Ok(ds.clone());
    }
    let mut counts = vec![0usize; ds.class_count() as usize];
    let mut keep = Vec::new();
    for i in 0..ds.len() {
        let c = ds.label(i) as usize;
        if counts[c] < cap {
            counts[c] += 1;
            keep.push(i as u32);
        }
    }
    ds.subset(&keep)
}

/// Runs the full incremental protocol on the configured dataset.
pub fn run(cfg: &RunConfig, data_root: &Path, out_dir: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let (train, test) = load_dataset(cfg, data_root)?;
    run_on_data(cfg, &train, &test, out_dir)
}

/// Runs the full incremental protocol on caller-provided datasets.
pub fn run_on_data<S: ImageSource>(
    cfg: &RunConfig,
    train: &S,
    test: &S,
    out_dir: Option<&Path>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        cfg.write_resolved(&dir.join("config.resolved"))?;
    }
    let stream = split_tasks(train, test, cfg.classes_per_task, cfg.seed)?;
    let ctx = Ctx {
        cfg,
        train,
        test,
        stream,
        out_dir,
    };
    let mut state = ctx.initial_state()?;
    for t in 1..=ctx.stream.tasks.len() {
        ctx.run_task(&mut state, t)?;
    }
    Ok(ctx.outcome(state))
}

/// Continues a checkpointed run. With `from_task` unset the most recent
/// checkpoint under `out_dir` is used.
pub fn resume(
    cfg: &RunConfig,
    data_root: &Path,
    out_dir: &Path,
    from_task: Option<u32>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let (train, test) = load_dataset(cfg, data_root)?;
    resume_on_data(cfg, &train, &test, out_dir, from_task)
}

/// Continues a checkpointed run on caller-provided datasets.
pub fn resume_on_data<S: ImageSource>(
    cfg: &RunConfig,
    train: &S,
    test: &S,
    out_dir: &Path,
    from_task: Option<u32>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let t0 = match from_task {
        Some(t) => t,
        None => latest_checkpoint_task(out_dir)?,
    };
    let ckpt = TaskCheckpoint::read(&out_dir.join(format!("checkpoint_task{t0}.frckpt")))?;
    if ckpt.digest != cfg.digest() {
        return Err(Error::Config(format!(
            "checkpoint was produced under config digest {}, current config digests to {}; \
             refusing to resume across settings",
            ckpt.digest,
            cfg.digest()
        )));
    }
    if ckpt.task_index != t0 {
        return Err(Error::Format(format!(
            "checkpoint_task{t0}.frckpt records task index {}",
            ckpt.task_index
        )));
    }
    let stream = split_tasks(train, test, cfg.classes_per_task, cfg.seed)?;
    if stream.class_order != ckpt.class_order {
        return Err(Error::Consistency(
            "checkpointed class order differs from the current dataset split; \
             the dataset must match the original run"
                .into(),
        ));
    }
    let metrics = MetricsRecord::from_json(&ckpt.metrics_json)?;
    let memory = if cfg.memory_per_class > 0 {
        let m = read_memory_snapshot(&out_dir.join(format!("memory_task{t0}.frmem")))?;
        if m.dim() != cfg.descriptor_dim {
            return Err(Error::Consistency(format!(
                "memory snapshot stores {}-dim descriptors, config says {}",
                m.dim(),
                cfg.descriptor_dim
            )));
        }
        m
    } else {
        FeatureMemory::new(cfg.descriptor_dim, cfg.memory_per_class)
    };
    let exemplars = if cfg.image_exemplars_per_class > 0 {
        read_exemplar_snapshot(&out_dir.join(format!("exemplars_task{t0}.frimg")))?
    } else {
        ImageExemplarStore::new(train.shape(), cfg.image_exemplars_per_class)
    };
    let mut state = RunState {
        network: ckpt.network,
        class_layout: ckpt.class_layout,
        stats: ckpt.stats,
        memory,
        exemplars,
        classifier: ckpt.classifier,
        adapter: ckpt.adapter,
        curve: metrics.curve,
        omega_prev: metrics.omega_prev,
        omega_first: metrics.omega_first,
        adapter_reports: Vec::new(),
    };
    let ctx = Ctx {
        cfg,
        train,
        test,
        stream,
        out_dir: Some(out_dir),
    };
    for t in (t0 as usize + 1)..=ctx.stream.tasks.len() {
        ctx.run_task(&mut state, t)?;
    }
    Ok(ctx.outcome(state))
}

/// Highest task index with a checkpoint file under `dir`.
pub fn latest_checkpoint_task(dir: &Path) -> Result<u32> {
    let entries = std::fs::read_dir(dir).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput(format!("run directory {}", dir.display()))
        } else {
            Error::Io(e)
        }
    })?;
    let mut best = None;
    for entry in entries {
        let name = entry?.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(t) = name
            .strip_prefix("checkpoint_task")
            .and_then(|r| r.strip_suffix(".frckpt"))
            .and_then(|r| r.parse::<u32>().ok())
        {
            best = Some(best.map_or(t, |b: u32| b.max(t)));
        }
    }
    best.ok_or_else(|| {
        Error::MissingInput(format!("no task checkpoints under {}", dir.display()))
    })
}

struct Ctx<'a, S> {
    cfg: &'a RunConfig,
    train: &'a S,
    test: &'a S,
    stream: TaskStream,
    out_dir: Option<&'a Path>,
}

impl<'a, S: ImageSource> Ctx<'a, S> {
    fn initial_state(&self) -> Result<RunState> {
        let cfg = self.cfg;
        let shape = self.train.shape();
        let stats = ChannelStats::compute(self.train, &self.stream.tasks[0].train_indices)?;
        let arch = default_cnn(shape, cfg.descriptor_dim)?;
        let extractor = Extractor::<f32>::new(
            shape,
            &arch,
            &mut stream_rng(cfg.seed, "net-init", 0),
        )?;
        let first_classes = self.stream.tasks[0].classes.clone();
        let head = CosineHead::<f32>::new(
            cfg.descriptor_dim,
            first_classes.len(),
            Some(cfg.eta_init as f32),
            &mut stream_rng(cfg.seed, "head-init", 0),
        );
        Ok(RunState {
            network: Network::new(extractor, head)?,
            class_layout: first_classes,
            stats,
            memory: FeatureMemory::new(cfg.descriptor_dim, cfg.memory_per_class),
            exemplars: ImageExemplarStore::new(shape, cfg.image_exemplars_per_class),
            classifier: None,
            adapter: None,
            curve: Vec::new(),
            omega_prev: Vec::new(),
            omega_first: Vec::new(),
            adapter_reports: Vec::new(),
        })
    }

    fn outcome(&self, state: RunState) -> RunOutcome {
        RunOutcome {
            metrics: state.metrics(self.cfg),
            class_order: self.stream.class_order.clone(),
            state,
        }
    }

    fn augment_policy(&self) -> Augment {
        if self.cfg.augment {
            Augment::FlipCrop {
                pad: 4,
                flip: self.cfg.dataset == DatasetChoice::Cifar10,
            }
        } else {
            Augment::None
        }
    }

    /// Maps class ids to their head column.
    fn positions(&self, layout: &[u32]) -> BTreeMap<u32, usize> {
        layout.iter().enumerate().map(|(p, &c)| (c, p)).collect()
    }

    fn run_task(&self, state: &mut RunState, t: usize) -> Result<()> {
        let cfg = self.cfg;
        let task = &self.stream.tasks[t - 1];
        let mut adapter_note = String::new();
        if t == 1 {
            self.train_network(state, task, None)?;
        } else {
            for &c in &task.classes {
                if state.class_layout.contains(&c) {
                    return Err(Error::Consistency(format!(
                        "class {c} of task {t} is already present in the head"
                    )));
                }
            }
            let frozen = state.network.clone();
            state.network.head.widen(
                task.classes.len(),
                &mut stream_rng(cfg.seed, "head-widen", t as u64),
            );
            state.class_layout.extend_from_slice(&task.classes);
            self.train_network(state, task, Some(&frozen))?;

            if cfg.memory_per_class > 0 {
                let pairs = build_pairs(
                    &frozen.extractor,
                    &state.network.extractor,
                    self.train,
                    &task.train_indices,
                    &state.stats,
                    EVAL_BATCH,
                )?;
                let position = self.positions(&state.class_layout);
                let cols = pairs
                    .labels
                    .iter()
                    .map(|l| {
                        position.get(l).copied().ok_or_else(|| {
                            Error::Consistency(format!("label {l} missing from the head layout"))
                        })
                    })
                    .collect::<Result<Vec<usize>>>()?;
                let (adapter, report) = train_adapter(
                    &pairs,
                    &state.network.head,
                    &cols,
                    &cfg.adapter_config(cfg.descriptor_dim),
                    stream_seed(cfg.seed, "adapter", t as u64),
                )?;
                adapt_memory(&mut state.memory, &adapter)?;
                self.refresh_exemplar_descriptors(state)?;
                adapter_note = format!(
                    ", adapter holdout cos {:.3}",
                    1.0 - report.holdout_similarity
                );
                state.adapter_reports.push(report);
                state.adapter = Some(adapter);
            }
        }
        self.store_new_task(state, task)?;
        if cfg.classifier == ClassifierMode::Feature {
            state.classifier = Some(self.fit_classifier(state, task, t)?);
        }
        self.finish_task(state, task, &adapter_note)
    }

    fn train_network(
        &self,
        state: &mut RunState,
        task: &TaskSplit,
        frozen: Option<&Network<f32>>,
    ) -> Result<()> {
        let cfg = self.cfg;
        let t = task.task_index as u64;
        let mut items: Vec<TrainItem> =
            task.train_indices.iter().map(|&i| TrainItem::Data(i)).collect();
        for (class, images) in state.exemplars.iter() {
            for slot in 0..images.len() {
                items.push(TrainItem::Exemplar { class, slot });
            }
        }
        let position = self.positions(&state.class_layout);
        let weights = cfg.loss_weights();
        let augment = self.augment_policy();
        let mut opt = Sgd::new(cfg.network_sgd(), state.network.param_count());
        let mut params = state.network.read_params();
        for epoch in 0..cfg.epochs {
            let salt = (t << 32) | epoch as u64;
            let batches = shuffled_chunks(
                &items,
                cfg.batch_size,
                stream_seed(cfg.seed, "net-batch", salt),
            )?;
            let mut aug_rng = stream_rng(cfg.seed, "augment", salt);
            for batch in &batches {
                let (x, labels) = assemble_batch(
                    self.train,
                    &state.exemplars,
                    batch,
                    &state.stats,
                    augment,
                    &mut aug_rng,
                )?;
                let cols = labels
                    .iter()
                    .map(|l| {
                        position.get(l).copied().ok_or_else(|| {
                            Error::Consistency(format!("label {l} missing from the head layout"))
                        })
                    })
                    .collect::<Result<Vec<usize>>>()?;
                let targets = one_hot::<f32>(&cols, state.network.head.classes());
                let (_, grads) = state.network.batch_loss_grads(
                    &x,
                    &targets,
                    frozen,
                    &weights,
                    frozen.is_none(),
                )?;
                opt.step(&mut params, &grads, epoch)?;
                state.network.write_params(&params)?;
            }
        }
        Ok(())
    }

    /// Replaces each exemplar-backed descriptor with an exact re-extraction
    /// of its stored image under the current extractor.
    fn refresh_exemplar_descriptors(&self, state: &mut RunState) -> Result<()> {
        if self.cfg.image_exemplars_per_class == 0 || self.cfg.memory_per_class == 0 {
            return Ok(());
        }
        let shape = state.exemplars.shape();
        let mut fresh: BTreeMap<(u32, u32), Vec<f32>> = BTreeMap::new();
        for (class, images) in state.exemplars.iter() {
            if images.is_empty() {
                continue;
            }
            let mut raw = Vec::with_capacity(images.len() * shape.pixel_count());
            for img in images {
                raw.extend_from_slice(&img.pixels);
            }
            let x = normalize_batch::<f32>(&raw, images.len(), shape, &state.stats);
            let feats = normalize_rows(state.network.extractor.features(&x));
            for (i, img) in images.iter().enumerate() {
                fresh.insert((class, img.source_index), feats.row(i).to_vec());
            }
        }
        for (class, descs) in state.memory.iter_mut() {
            for d in descs.iter_mut() {
                if let Some(v) = d.source_index.and_then(|s| fresh.get(&(class, s))) {
                    d.vector = v.clone();
                    d.adapt_count = 0;
                }
            }
        }
        Ok(())
    }

    /// Extracts, herds and stores the finished task's descriptors and
    /// exemplar images.
    fn store_new_task(&self, state: &mut RunState, task: &TaskSplit) -> Result<()> {
        let cfg = self.cfg;
        if cfg.memory_per_class == 0 && cfg.image_exemplars_per_class == 0 {
            return Ok(());
        }
        let feats = extract_features(
            &state.network.extractor,
            self.train,
            &task.train_indices,
            &state.stats,
        );
        let labels: Vec<u32> = task
            .train_indices
            .iter()
            .map(|&i| self.train.label(i as usize))
            .collect();
        if cfg.memory_per_class > 0 {
            state.memory.store_task_features(
                feats.view(),
                &labels,
                cfg.track_sources().then_some(task.train_indices.as_slice()),
            )?;
            if cfg.image_exemplars_per_class > 0 {
                // The memory holds each class in herding order, so its prefix
                // is exactly the exemplar selection.
                for &class in &task.classes {
                    let descs = state.memory.descriptors(class).ok_or_else(|| {
                        Error::Orchestration(format!("class {class} missing after storage"))
                    })?;
                    let images = descs
                        .iter()
                        .take(cfg.image_exemplars_per_class)
                        .map(|d| {
                            let src = d.source_index.expect("hybrid storage tracks sources");
                            ExemplarImage {
                                pixels: read_pixels(self.train, src),
                                source_index: src,
                            }
                        })
                        .collect();
                    state.exemplars.insert_class(class, images)?;
                }
            }
        } else {
            // Image exemplars without feature memory: herd per class directly.
            for &class in &task.classes {
                let rows: Vec<usize> = labels
                    .iter()
                    .enumerate()
                    .filter(|&(_, &l)| l == class)
                    .map(|(r, _)| r)
                    .collect();
                let mut class_feats = Array2::zeros((rows.len(), feats.ncols()));
                for (i, &r) in rows.iter().enumerate() {
                    class_feats.row_mut(i).assign(&feats.row(r));
                }
                let picked = herding_select(class_feats.view(), cfg.image_exemplars_per_class)?;
                let images = picked
                    .into_iter()
                    .map(|i| {
                        let src = task.train_indices[rows[i]];
                        ExemplarImage {
                            pixels: read_pixels(self.train, src),
                            source_index: src,
                        }
                    })
                    .collect();
                state.exemplars.insert_class(class, images)?;
            }
        }
        Ok(())
    }

    fn fit_classifier(
        &self,
        state: &RunState,
        task: &TaskSplit,
        t: usize,
    ) -> Result<FeatureClassifier> {
        let cfg = self.cfg;
        let seed = stream_seed(cfg.seed, "classifier", t as u64);
        let ccfg = cfg.classifier_config();
        if !cfg.unbalanced_full_pool {
            return train_feature_classifier(&state.memory, &ccfg, seed);
        }
        // Ablation pool: stored old-class rows plus every fresh descriptor
        // of the current task.
        let (mem_feats, mem_labels) = state.memory.all_rows();
        let keep: Vec<usize> = mem_labels
            .iter()
            .enumerate()
            .filter(|&(_, l)| !task.classes.contains(l))
            .map(|(i, _)| i)
            .collect();
        let fresh = extract_features(
            &state.network.extractor,
            self.train,
            &task.train_indices,
            &state.stats,
        );
        let n = keep.len() + fresh.nrows();
        let mut feats = Array2::zeros((n, state.memory.dim()));
        let mut labels = Vec::with_capacity(n);
        for (row, &i) in keep.iter().enumerate() {
            feats.row_mut(row).assign(&mem_feats.row(i));
            labels.push(mem_labels[i]);
        }
        for (row, &i) in task.train_indices.iter().enumerate() {
            feats.row_mut(keep.len() + row).assign(&fresh.row(row));
            labels.push(self.train.label(i as usize));
        }
        train_on_pool(feats.view(), &labels, &ccfg, seed)
    }

    fn finish_task(
        &self,
        state: &mut RunState,
        task: &TaskSplit,
        adapter_note: &str,
    ) -> Result<()> {
        let cfg = self.cfg;
        let t = task.task_index;
        let accuracy = match cfg.classifier {
            ClassifierMode::Feature => {
                let clf = state.classifier.as_ref().ok_or_else(|| {
                    Error::Orchestration("feature classifier missing at evaluation".into())
                })?;
                evaluate_task(
                    clf,
                    &state.network.extractor,
                    &state.stats,
                    self.test,
                    &task.test_indices_cumulative,
                    EVAL_BATCH,
                    cfg.top_k,
                )?
            }
            ClassifierMode::NetworkHead => {
                let predictor = HeadPredictor {
                    head: &state.network.head,
                    class_layout: &state.class_layout,
                };
                evaluate_task(
                    &predictor,
                    &state.network.extractor,
                    &state.stats,
                    self.test,
                    &task.test_indices_cumulative,
                    EVAL_BATCH,
                    cfg.top_k,
                )?
            }
        };
        state.curve.push(CurvePoint {
            task: t,
            classes_seen: self.stream.classes_seen(t),
            accuracy,
        });
        let mut omega_note = String::new();
        if t >= 2 && cfg.track_provenance_images && cfg.memory_per_class > 0 {
            let prev = adaptation_quality(
                &state.memory,
                &state.network.extractor,
                &state.stats,
                self.train,
                &self.stream.tasks[t - 2].classes,
                EVAL_BATCH,
            )?;
            let first = adaptation_quality(
                &state.memory,
                &state.network.extractor,
                &state.stats,
                self.train,
                &self.stream.tasks[0].classes,
                EVAL_BATCH,
            )?;
            state.omega_prev.push(prev);
            state.omega_first.push(first);
            omega_note = format!(", omega_prev {prev:.3}, omega_first {first:.3}");
        }
        let metrics = state.metrics(cfg);
        if let Some(dir) = self.out_dir {
            metrics.write_json(&dir.join("metrics.json"))?;
            metrics.write_curve_csv(&dir.join("curve.csv"))?;
            let fp = serde_json::to_string_pretty(&metrics.footprint)
                .map_err(|e| Error::Format(format!("footprint serialization: {e}")))?;
            atomic_write(&dir.join("footprint.json"), |w| w.bytes(fp.as_bytes()))?;
            if cfg.memory_per_class > 0 {
                write_memory_snapshot(&state.memory, &dir.join(format!("memory_task{t}.frmem")))?;
            }
            if cfg.image_exemplars_per_class > 0 {
                write_exemplar_snapshot(
                    &state.exemplars,
                    &dir.join(format!("exemplars_task{t}.frimg")),
                )?;
            }
            let ckpt = TaskCheckpoint {
                digest: cfg.digest(),
                task_index: t as u32,
                class_order: self.stream.class_order.clone(),
                network: state.network.clone(),
                class_layout: state.class_layout.clone(),
                stats: state.stats.clone(),
                classifier: state.classifier.clone(),
                adapter: state.adapter.clone(),
                metrics_json: metrics.to_json()?,
            };
            ckpt.write(&dir.join(format!("checkpoint_task{t}.frckpt")))?;
        }
        println!(
            "task {t}/{}: classes {}, accuracy {accuracy:.4}{adapter_note}{omega_note}",
            self.stream.tasks.len(),
            self.stream.classes_seen(t),
        );
        Ok(())
    }
}

/// Normalized unit-length descriptors of the given rows, extracted in
/// fixed-size batches.
fn extract_features<S: ImageSource>(
    extractor: &Extractor<f32>,
    src: &S,
    indices: &[u32],
    stats: &ChannelStats,
) -> Array2<f32> {
    let mut out = Array2::zeros((indices.len(), extractor.output_dim()));
    let mut at = 0;
    for chunk in indices.chunks(EVAL_BATCH) {
        let x = gather_batch::<f32, _>(src, chunk, stats);
        let f = normalize_rows(extractor.features(&x));
        out.slice_mut(s![at..at + chunk.len(), ..]).assign(&f);
        at += chunk.len();
    }
    out
}

fn read_pixels<S: ImageSource>(src: &S, index: u32) -> Vec<u8> {
    let mut buf = vec![0u8; src.shape().pixel_count()];
    src.read_image(index as usize, &mut buf);
    buf
}

/// Materializes one training batch: raw pixels (augmented in place) plus
/// labels, mixing dataset rows and stored exemplar images.
fn assemble_batch<S: ImageSource>(
    train: &S,
    exemplars: &ImageExemplarStore,
    items: &[TrainItem],
    stats: &ChannelStats,
    augment: Augment,
    rng: &mut ChaCha8Rng,
) -> Result<(Array4<f32>, Vec<u32>)> {
    let shape = train.shape();
    let size = shape.pixel_count();
    let mut raw = vec![0u8; items.len() * size];
    let mut labels = Vec::with_capacity(items.len());
    for (slot, item) in items.iter().enumerate() {
        let dst = &mut raw[slot * size..(slot + 1) * size];
        match *item {
            TrainItem::Data(i) => {
                train.read_image(i as usize, dst);
                labels.push(train.label(i as usize));
            }
            TrainItem::Exemplar { class, slot: at } => {
                let images = exemplars.images(class).ok_or_else(|| {
                    Error::Orchestration(format!("exemplar class {class} disappeared"))
                })?;
                dst.copy_from_slice(&images[at].pixels);
                labels.push(class);
            }
        }
    }
    augment_batch(&mut raw, items.len(), shape, augment, rng);
    Ok((normalize_batch(&raw, items.len(), shape, stats), labels))
}

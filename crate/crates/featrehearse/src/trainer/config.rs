//! Run configuration: a flat `key = value` file with every knob of the
//! incremental pipeline, plus a canonical rendering whose hash identifies
//! the run in checkpoints.

use crate::adaptation::AdapterTrainConfig;
use crate::binio::atomic_write;
use crate::classifier::ClassifierConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::SgdConfig;
use crate::rng::fnv1a64;
use std::fmt;
use std::path::Path;

/// Which dataset the run trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetChoice {
    /// Built-in procedural 10-glyph corpus; needs no files on disk.
    Synthetic,
    /// MNIST IDX files under the data root.
    Mnist,
    /// CIFAR-10 binary batches under the data root.
    Cifar10,
}

impl fmt::Display for DatasetChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetChoice::Synthetic => "synthetic",
            DatasetChoice::Mnist => "mnist",
            DatasetChoice::Cifar10 => "cifar10",
        })
    }
}

/// Which predictor produces the reported accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierMode {
    /// Balanced linear classifier trained on stored descriptors.
    Feature,
    /// The network's own cosine head, for memory-free baselines.
    NetworkHead,
}

impl fmt::Display for ClassifierMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierMode::Feature => "feature",
            ClassifierMode::NetworkHead => "network_head",
        })
    }
}

/// Every setting of an incremental run. Unset keys keep the defaults below,
/// which target a desk-scale run on one CPU core.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetChoice,
    pub seed: u64,
    /// Classes revealed per incremental task.
    pub classes_per_task: usize,
    pub descriptor_dim: usize,
    /// Stored descriptors per class; 0 disables feature memory.
    pub memory_per_class: usize,
    /// Exemplar images kept per class (the herding prefix); 0 disables them.
    pub image_exemplars_per_class: usize,
    /// Distillation weight.
    pub lambda: f64,
    /// Feature-drift weight.
    pub gamma: f64,
    /// Similarity weight in the adapter objective.
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the network learning rate is divided by
    /// `lr_decay_factor` (cumulative).
    pub lr_milestones: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Initial value of the head's learned score scale.
    pub eta_init: f64,
    /// Adapter hidden width as a multiple of the descriptor dimension.
    pub adapter_hidden_multiplier: usize,
    pub adapter_epochs: usize,
    pub adapter_batch_size: usize,
    pub adapter_learning_rate: f64,
    pub adapter_momentum: f64,
    pub adapter_weight_decay: f64,
    pub adapter_holdout_fraction: f64,
    pub classifier: ClassifierMode,
    pub classifier_c_reg: f64,
    pub classifier_epochs: usize,
    pub classifier_batch_size: usize,
    pub classifier_learning_rate: f64,
    pub classifier_balanced: bool,
    /// Ablation: train the classifier on stored old-class descriptors plus
    /// every fresh current-task feature instead of the stored pool alone.
    pub unbalanced_full_pool: bool,
    /// Random flip/crop augmentation during network training.
    pub augment: bool,
    /// Record which training image produced each stored descriptor, enabling
    /// the adaptation-quality diagnostic.
    pub track_provenance_images: bool,
    /// Report top-k accuracy (1 = standard).
    pub top_k: usize,
    /// Cap on training images per class, 0 = unlimited.
    pub train_cap_per_class: usize,
    /// Cap on test images per class, 0 = unlimited.
    pub test_cap_per_class: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetChoice::Synthetic,
            seed: 1,
            classes_per_task: 2,
            descriptor_dim: 64,
            memory_per_class: 200,
            image_exemplars_per_class: 0,
            lambda: 1.0,
            gamma: 0.05,
            alpha: 100.0,
            epochs: 30,
            batch_size: 128,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-5,
            lr_milestones: vec![20, 26],
            lr_decay_factor: 5.0,
            eta_init: 10.0,
            adapter_hidden_multiplier: 16,
            adapter_epochs: 40,
            adapter_batch_size: 128,
            adapter_learning_rate: 0.01,
            adapter_momentum: 0.9,
            adapter_weight_decay: 0.0,
            adapter_holdout_fraction: 0.1,
            classifier: ClassifierMode::Feature,
            classifier_c_reg: 1.0,
            classifier_epochs: 100,
            classifier_batch_size: 64,
            classifier_learning_rate: 0.5,
            classifier_balanced: true,
            unbalanced_full_pool: false,
            augment: false,
            track_provenance_images: false,
            top_k: 1,
            train_cap_per_class: 600,
            test_cap_per_class: 100,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "key '{key}': expected true or false, got '{value}'"
        ))),
    }
}

fn parse_milestones(value: &str) -> Result<Vec<usize>> {
    let inner = value.trim_start_matches('[').trim_end_matches(']').trim();
    if inner.is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|part| parse_num("lr_milestones", part.trim()))
        .collect()
}

impl RunConfig {
    /// Parses a flat config file: one `key = value` per line, `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (at, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", at + 1))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingInput(format!("config file {}", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        Self::parse(&text)
    }

    /// Applies one `KEY=VALUE` override string, as given on a command line.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec.split_once('=').ok_or_else(|| {
            Error::Config(format!("override '{spec}': expected KEY=VALUE"))
        })?;
        self.apply(key.trim(), value.trim())
    }

    /// Sets one key from its text value; unknown keys are rejected.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => {
                self.dataset = match value {
                    "synthetic" => DatasetChoice::Synthetic,
                    "mnist" => DatasetChoice::Mnist,
                    "cifar10" => DatasetChoice::Cifar10,
                    _ => {
                        return Err(Error::Config(format!(
                            "key 'dataset': unknown dataset '{value}' \
                             (expected synthetic, mnist or cifar10)"
                        )))
                    }
                }
            }
            "seed" => self.seed = parse_num(key, value)?,
            "classes_per_task" => self.classes_per_task = parse_num(key, value)?,
            "descriptor_dim" => self.descriptor_dim = parse_num(key, value)?,
            "memory_per_class" => self.memory_per_class = parse_num(key, value)?,
            "image_exemplars_per_class" => {
                self.image_exemplars_per_class = parse_num(key, value)?
            }
            "lambda" => self.lambda = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "alpha" => self.alpha = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "lr_milestones" => self.lr_milestones = parse_milestones(value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse_num(key, value)?,
            "eta_init" => self.eta_init = parse_num(key, value)?,
            "adapter_hidden_multiplier" => {
                self.adapter_hidden_multiplier = parse_num(key, value)?
            }
            "adapter_epochs" => self.adapter_epochs = parse_num(key, value)?,
            "adapter_batch_size" => self.adapter_batch_size = parse_num(key, value)?,
            "adapter_learning_rate" => self.adapter_learning_rate = parse_num(key, value)?,
            "adapter_momentum" => self.adapter_momentum = parse_num(key, value)?,
            "adapter_weight_decay" => self.adapter_weight_decay = parse_num(key, value)?,
            "adapter_holdout_fraction" => {
                self.adapter_holdout_fraction = parse_num(key, value)?
            }
            "classifier" => {
                self.classifier = match value {
                    "feature" => ClassifierMode::Feature,
                    "network_head" => ClassifierMode::NetworkHead,
                    _ => {
                        return Err(Error::Config(format!(
                            "key 'classifier': unknown mode '{value}' \
                             (expected feature or network_head)"
                        )))
                    }
                }
            }
            "classifier_c_reg" => self.classifier_c_reg = parse_num(key, value)?,
            "classifier_epochs" => self.classifier_epochs = parse_num(key, value)?,
            "classifier_batch_size" => self.classifier_batch_size = parse_num(key, value)?,
            "classifier_learning_rate" => {
                self.classifier_learning_rate = parse_num(key, value)?
            }
            "classifier_balanced" => self.classifier_balanced = parse_bool(key, value)?,
            "unbalanced_full_pool" => self.unbalanced_full_pool = parse_bool(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "track_provenance_images" => {
                self.track_provenance_images = parse_bool(key, value)?
            }
            "top_k" => self.top_k = parse_num(key, value)?,
            "train_cap_per_class" => self.train_cap_per_class = parse_num(key, value)?,
            "test_cap_per_class" => self.test_cap_per_class = parse_num(key, value)?,
            "preset" => self.apply_preset(value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Named bundles for the network training schedule. `desk` is the
    /// default 30-epoch schedule; `full` is the long 70-epoch schedule with
    /// learning-rate drops at 50 and 64.
    fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "desk" => {
                self.epochs = 30;
                self.lr_milestones = vec![20, 26];
                self.lr_decay_factor = 5.0;
            }
            "full" => {
                self.epochs = 70;
                self.lr_milestones = vec![50, 64];
                self.lr_decay_factor = 5.0;
            }
            _ => {
                return Err(Error::Config(format!(
                    "key 'preset': unknown preset '{name}' (expected desk or full)"
                )))
            }
        }
        Ok(())
    }

    /// Rejects invalid or self-contradictory settings.
    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: usize) -> Result<()> {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
            Ok(())
        }
        fn positive_f(name: &str, v: f64) -> Result<()> {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive")));
            }
            Ok(())
        }
        fn unit_interval(name: &str, v: f64) -> Result<()> {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1)")));
            }
            Ok(())
        }
        fn non_negative(name: &str, v: f64) -> Result<()> {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
            Ok(())
        }
        positive("classes_per_task", self.classes_per_task)?;
        positive("descriptor_dim", self.descriptor_dim)?;
        positive("epochs", self.epochs)?;
        positive("batch_size", self.batch_size)?;
        positive("adapter_hidden_multiplier", self.adapter_hidden_multiplier)?;
        positive("adapter_epochs", self.adapter_epochs)?;
        positive("adapter_batch_size", self.adapter_batch_size)?;
        positive("classifier_epochs", self.classifier_epochs)?;
        positive("classifier_batch_size", self.classifier_batch_size)?;
        positive("top_k", self.top_k)?;
        positive_f("learning_rate", self.learning_rate)?;
        positive_f("adapter_learning_rate", self.adapter_learning_rate)?;
        positive_f("classifier_learning_rate", self.classifier_learning_rate)?;
        positive_f("lr_decay_factor", self.lr_decay_factor)?;
        positive_f("eta_init", self.eta_init)?;
        positive_f("classifier_c_reg", self.classifier_c_reg)?;
        unit_interval("momentum", self.momentum)?;
        unit_interval("adapter_momentum", self.adapter_momentum)?;
        unit_interval("adapter_holdout_fraction", self.adapter_holdout_fraction)?;
        non_negative("weight_decay", self.weight_decay)?;
        non_negative("adapter_weight_decay", self.adapter_weight_decay)?;
        non_negative("lambda", self.lambda)?;
        non_negative("gamma", self.gamma)?;
        non_negative("alpha", self.alpha)?;
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "lr_milestones must be strictly increasing".into(),
            ));
        }
        if self.classifier == ClassifierMode::Feature && self.memory_per_class == 0 {
            return Err(Error::Config(
                "classifier = feature needs memory_per_class >= 1".into(),
            ));
        }
        if self.memory_per_class > 0
            && self.image_exemplars_per_class > self.memory_per_class
        {
            return Err(Error::Config(format!(
                "image_exemplars_per_class ({}) cannot exceed memory_per_class ({})",
                self.image_exemplars_per_class, self.memory_per_class
            )));
        }
        Ok(())
    }

    /// Whether stored descriptors must remember their source image index.
    pub fn track_sources(&self) -> bool {
        self.track_provenance_images || self.image_exemplars_per_class > 0
    }

    pub fn network_sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            decay_milestones: self.lr_milestones.clone(),
            decay_factor: self.lr_decay_factor,
        }
    }

    pub fn adapter_config(&self, dim: usize) -> AdapterTrainConfig {
        AdapterTrainConfig {
            alpha: self.alpha,
            hidden_dim: self.adapter_hidden_multiplier * dim,
            epochs: self.adapter_epochs,
            batch_size: self.adapter_batch_size,
            learning_rate: self.adapter_learning_rate,
            momentum: self.adapter_momentum,
            weight_decay: self.adapter_weight_decay,
            holdout_fraction: self.adapter_holdout_fraction,
        }
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            c_reg: self.classifier_c_reg,
            epochs: self.classifier_epochs,
            batch_size: self.classifier_batch_size,
            learning_rate: self.classifier_learning_rate,
            balanced: self.classifier_balanced,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            gamma: self.gamma,
        }
    }

    /// Canonical one-key-per-line rendering; every field appears exactly
    /// once, so equal configs render identically.
    pub fn canonical_text(&self) -> String {
        let milestones = self
            .lr_milestones
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut out = String::new();
        let mut put = |key: &str, value: String| {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        };
        put("dataset", self.dataset.to_string());
        put("seed", self.seed.to_string());
        put("classes_per_task", self.classes_per_task.to_string());
        put("descriptor_dim", self.descriptor_dim.to_string());
        put("memory_per_class", self.memory_per_class.to_string());
        put(
            "image_exemplars_per_class",
            self.image_exemplars_per_class.to_string(),
        );
        put("lambda", self.lambda.to_string());
        put("gamma", self.gamma.to_string());
        put("alpha", self.alpha.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("momentum", self.momentum.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("lr_milestones", milestones);
        put("lr_decay_factor", self.lr_decay_factor.to_string());
        put("eta_init", self.eta_init.to_string());
        put(
            "adapter_hidden_multiplier",
            self.adapter_hidden_multiplier.to_string(),
        );
        put("adapter_epochs", self.adapter_epochs.to_string());
        put("adapter_batch_size", self.adapter_batch_size.to_string());
        put(
            "adapter_learning_rate",
            self.adapter_learning_rate.to_string(),
        );
        put("adapter_momentum", self.adapter_momentum.to_string());
        put(
            "adapter_weight_decay",
            self.adapter_weight_decay.to_string(),
        );
        put(
            "adapter_holdout_fraction",
            self.adapter_holdout_fraction.to_string(),
        );
        put("classifier", self.classifier.to_string());
        put("classifier_c_reg", self.classifier_c_reg.to_string());
        put("classifier_epochs", self.classifier_epochs.to_string());
        put(
            "classifier_batch_size",
            self.classifier_batch_size.to_string(),
        );
        put(
            "classifier_learning_rate",
            self.classifier_learning_rate.to_string(),
        );
        put("classifier_balanced", self.classifier_balanced.to_string());
        put("unbalanced_full_pool", self.unbalanced_full_pool.to_string());
        put("augment", self.augment.to_string());
        put(
            "track_provenance_images",
            self.track_provenance_images.to_string(),
        );
        put("top_k", self.top_k.to_string());
        put("train_cap_per_class", self.train_cap_per_class.to_string());
        put("test_cap_per_class", self.test_cap_per_class.to_string());
        out
    }

    /// Hash of the canonical rendering; checkpoints embed it so a resume
    /// with different settings is rejected.
    pub fn digest(&self) -> String {
        format!("{:016x}", fnv1a64(self.canonical_text().as_bytes()))
    }

    /// Writes the fully resolved config next to the run's other artifacts.
    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        let body = format!("# digest = {}\n{}", self.digest(), self.canonical_text());
        atomic_write(path, |w| w.bytes(body.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let parsed = RunConfig::parse(&cfg.canonical_text()).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.digest(), cfg.digest());
    }

    #[test]
    fn parse_overrides_and_comments() {
        let text = "\
# an incremental run
dataset = synthetic
seed = 7   # trailing comment
classes_per_task = 5
lr_milestones = [10, 15]
gamma = 0.5
classifier = network_head
augment = true
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.classes_per_task, 5);
        assert_eq!(cfg.lr_milestones, vec![10, 15]);
        assert_eq!(cfg.gamma, 0.5);
        assert_eq!(cfg.classifier, ClassifierMode::NetworkHead);
        assert!(cfg.augment);
        // Untouched keys keep their defaults.
        assert_eq!(cfg.batch_size, RunConfig::default().batch_size);
    }

    #[test]
    fn unknown_key_and_bad_values_are_config_errors() {
        for text in [
            "no_such_key = 1",
            "seed = notanumber",
            "augment = yes",
            "dataset = imagenet",
            "seed 7",
            "preset = turbo",
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }

    #[test]
    fn digest_tracks_content() {
        let base = RunConfig::default();
        let mut changed = base.clone();
        changed.seed = 2;
        assert_ne!(base.digest(), changed.digest());
        assert_eq!(base.digest(), base.clone().digest());
        assert_eq!(base.digest().len(), 16);
    }

    #[test]
    fn validation_rejects_contradictions() {
        let mut cfg = RunConfig::default();
        cfg.memory_per_class = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.classifier = ClassifierMode::NetworkHead;
        cfg.validate().unwrap();

        let mut cfg = RunConfig::default();
        cfg.image_exemplars_per_class = cfg.memory_per_class + 1;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::default();
        cfg.lr_milestones = vec![10, 10];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::default();
        cfg.momentum = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::default();
        cfg.top_k = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn presets_set_the_schedule() {
        let cfg = RunConfig::parse("preset = full").unwrap();
        assert_eq!(cfg.epochs, 70);
        assert_eq!(cfg.lr_milestones, vec![50, 64]);
        // Later keys override preset members.
        let cfg = RunConfig::parse("preset = full\nepochs = 10").unwrap();
        assert_eq!(cfg.epochs, 10);
        assert_eq!(cfg.lr_milestones, vec![50, 64]);
    }

    #[test]
    fn resolved_file_reparses_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.resolved");
        let mut cfg = RunConfig::default();
        cfg.apply_override("seed=9").unwrap();
        cfg.write_resolved(&path).unwrap();
        let reparsed = RunConfig::from_file(&path).unwrap();
        assert_eq!(reparsed, cfg);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(&format!("# digest = {}", cfg.digest())));
    }

    #[test]
    fn missing_file_is_missing_input() {
        let err = RunConfig::from_file(Path::new("/nonexistent/config")).unwrap_err();
        assert!(matches!(err, Error::MissingInput(_)));
    }

    #[test]
    fn accessors_copy_fields() {
        let cfg = RunConfig::default();
        let sgd = cfg.network_sgd();
        assert_eq!(sgd.learning_rate, cfg.learning_rate);
        assert_eq!(sgd.decay_milestones, cfg.lr_milestones);
        let ad = cfg.adapter_config(64);
        assert_eq!(ad.hidden_dim, 16 * 64);
        assert_eq!(ad.alpha, cfg.alpha);
        let cl = cfg.classifier_config();
        assert!(cl.balanced);
        let lw = cfg.loss_weights();
        assert_eq!(lw.lambda, cfg.lambda);
        assert_eq!(lw.gamma, cfg.gamma);
        assert!(!cfg.track_sources());
        let mut cfg = cfg;
        cfg.image_exemplars_per_class = 5;
        assert!(cfg.track_sources());
    }
}

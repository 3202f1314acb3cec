//! `FRCKPT1` task checkpoints: everything needed to resume a run after any
//! completed task, in one little-endian file. The stored config digest ties
//! the checkpoint to the exact settings that produced it.

use crate::binio::{atomic_write, Reader};
use crate::classifier::FeatureClassifier;
use crate::data::{ChannelStats, ImageShape};
use crate::error::{Error, Result};
use crate::model::{AdapterNetwork, CosineHead, Extractor, LayerSpec, Network};
use crate::rng::stream_rng;
use ndarray::{Array1, Array2};
use std::path::Path;

const MAGIC: &[u8] = b"FRCKPT1";
const VERSION: u16 = 1;

/// Snapshot of the run state after one completed task.
#[derive(Debug, Clone)]
pub struct TaskCheckpoint {
    /// Digest of the resolved config that produced this run.
    pub digest: String,
    /// 1-based index of the last completed task.
    pub task_index: u32,
    /// Full shuffled class order of the run (all tasks, not just seen ones).
    pub class_order: Vec<u32>,
    pub network: Network<f32>,
    /// Class id carried by each head column.
    pub class_layout: Vec<u32>,
    pub stats: ChannelStats,
    pub classifier: Option<FeatureClassifier>,
    pub adapter: Option<AdapterNetwork<f32>>,
    /// Metrics accumulated so far, as the `metrics.json` body.
    pub metrics_json: String,
}

impl TaskCheckpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let extractor = &self.network.extractor;
        let head = &self.network.head;
        let shape = extractor.input_shape();
        let arch = serde_json::to_string(extractor.specs())
            .map_err(|e| Error::Format(format!("architecture serialization: {e}")))?;
        atomic_write(path, |w| {
            w.magic(MAGIC)?;
            w.u16(VERSION)?;
            w.string(&self.digest)?;
            w.u32(self.task_index)?;
            w.u32(self.class_order.len() as u32)?;
            for &c in &self.class_order {
                w.u32(c)?;
            }
            w.u32(shape.channels as u32)?;
            w.u32(shape.height as u32)?;
            w.u32(shape.width as u32)?;
            w.string(&arch)?;
            let params = extractor.read_params();
            w.u64(params.len() as u64)?;
            w.f32_slice(&params)?;
            w.u32(head.dim() as u32)?;
            w.u32(head.classes() as u32)?;
            w.u8(head.eta().is_some() as u8)?;
            w.f32_slice(&head.read_params())?;
            w.u32(self.class_layout.len() as u32)?;
            for &c in &self.class_layout {
                w.u32(c)?;
            }
            w.u32(self.stats.mean.len() as u32)?;
            w.f32_slice(&self.stats.mean)?;
            w.f32_slice(&self.stats.std)?;
            match &self.classifier {
                None => w.u8(0)?,
                Some(clf) => {
                    w.u8(1)?;
                    let (k, d) = clf.weight().dim();
                    w.u32(k as u32)?;
                    w.u32(d as u32)?;
                    w.f32(clf.c_reg())?;
                    for &c in clf.class_ids() {
                        w.u32(c)?;
                    }
                    w.f32_slice(clf.weight().as_slice().expect("contiguous weight"))?;
                    w.f32_slice(clf.bias().as_slice().expect("contiguous bias"))?;
                }
            }
            match &self.adapter {
                None => w.u8(0)?,
                Some(net) => {
                    w.u8(1)?;
                    w.u32(net.dim() as u32)?;
                    w.u32(net.hidden() as u32)?;
                    let params = net.read_params();
                    w.u64(params.len() as u64)?;
                    w.f32_slice(&params)?;
                }
            }
            w.string(&self.metrics_json)
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path)?;
        r.expect_magic(MAGIC)?;
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported checkpoint version {version}",
                path.display()
            )));
        }
        let digest = r.string("config digest")?;
        let task_index = r.u32("task index")?;
        let order_len = r.u32("class order length")? as usize;
        let mut class_order = Vec::with_capacity(order_len);
        for _ in 0..order_len {
            class_order.push(r.u32("class order entry")?);
        }
        let shape = ImageShape {
            channels: r.u32("input channels")? as usize,
            height: r.u32("input height")? as usize,
            width: r.u32("input width")? as usize,
        };
        let arch_text = r.string("architecture")?;
        let arch: Vec<LayerSpec> = serde_json::from_str(&arch_text)
            .map_err(|e| Error::Format(format!("{}: architecture: {e}", path.display())))?;
        // Parameters are overwritten below, so the init rng never matters.
        let mut scratch = stream_rng(0, "checkpoint-rebuild", 0);
        let mut extractor = Extractor::<f32>::new(shape, &arch, &mut scratch)?;
        let count = r.u64("extractor parameter count")? as usize;
        if count != extractor.param_count() {
            return Err(Error::Format(format!(
                "{}: extractor has {} parameters, file stores {count}",
                path.display(),
                extractor.param_count()
            )));
        }
        let params = r.f32_vec(count, "extractor parameters")?;
        extractor.write_params(&params)?;
        let head_dim = r.u32("head dim")? as usize;
        let head_classes = r.u32("head classes")? as usize;
        let has_eta = r.u8("head eta flag")? != 0;
        let mut head =
            CosineHead::<f32>::new(head_dim, head_classes, has_eta.then_some(0.0), &mut scratch);
        let head_params = r.f32_vec(head.param_count(), "head parameters")?;
        head.write_params(&head_params)?;
        let layout_len = r.u32("class layout length")? as usize;
        if layout_len != head_classes {
            return Err(Error::Format(format!(
                "{}: head has {head_classes} columns but layout lists {layout_len}",
                path.display()
            )));
        }
        let mut class_layout = Vec::with_capacity(layout_len);
        for _ in 0..layout_len {
            class_layout.push(r.u32("class layout entry")?);
        }
        let channels = r.u32("stats channels")? as usize;
        let stats = ChannelStats {
            mean: r.f32_vec(channels, "channel means")?,
            std: r.f32_vec(channels, "channel stds")?,
        };
        let classifier = if r.u8("classifier flag")? != 0 {
            let k = r.u32("classifier classes")? as usize;
            let d = r.u32("classifier dim")? as usize;
            let c_reg = r.f32("classifier c_reg")?;
            let mut class_ids = Vec::with_capacity(k);
            for _ in 0..k {
                class_ids.push(r.u32("classifier class id")?);
            }
            let weight = Array2::from_shape_vec((k, d), r.f32_vec(k * d, "classifier weight")?)
                .expect("shape matches read size");
            let bias = Array1::from_vec(r.f32_vec(k, "classifier bias")?);
            Some(FeatureClassifier::from_parts(
                weight,
                bias,
                class_ids,
                c_reg,
            )?)
        } else {
            None
        };
        let adapter = if r.u8("adapter flag")? != 0 {
            let dim = r.u32("adapter dim")? as usize;
            let hidden = r.u32("adapter hidden")? as usize;
            let mut net = AdapterNetwork::<f32>::new(dim, hidden, &mut scratch);
            let count = r.u64("adapter parameter count")? as usize;
            if count != net.param_count() {
                return Err(Error::Format(format!(
                    "{}: adapter has {} parameters, file stores {count}",
                    path.display(),
                    net.param_count()
                )));
            }
            let params = r.f32_vec(count, "adapter parameters")?;
            net.write_params(&params)?;
            Some(net)
        } else {
            None
        };
        let metrics_json = r.string("metrics")?;
        r.expect_eof()?;
        Ok(Self {
            digest,
            task_index,
            class_order,
            network: Network { extractor, head },
            class_layout,
            stats,
            classifier,
            adapter,
            metrics_json,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::default_cnn;

    fn sample_checkpoint(with_optional: bool) -> TaskCheckpoint {
        let shape = ImageShape {
            channels: 1,
            height: 8,
            width: 8,
        };
        let mut rng = stream_rng(5, "ckpt-test", 0);
        let arch = default_cnn(shape, 16).unwrap();
        let extractor = Extractor::<f32>::new(shape, &arch, &mut rng).unwrap();
        let head = CosineHead::<f32>::new(16, 4, Some(10.0), &mut rng);
        let classifier = with_optional.then(|| {
            FeatureClassifier::from_parts(
                Array2::from_shape_fn((4, 16), |(i, j)| (i * 16 + j) as f32 * 0.01),
                Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0]),
                vec![2, 3, 5, 7],
                1.0,
            )
            .unwrap()
        });
        let adapter = with_optional.then(|| AdapterNetwork::<f32>::new(16, 32, &mut rng));
        TaskCheckpoint {
            digest: "0123456789abcdef".into(),
            task_index: 2,
            class_order: vec![2, 5, 3, 7, 0, 1],
            network: Network { extractor, head },
            class_layout: vec![2, 5, 3, 7],
            stats: ChannelStats {
                mean: vec![0.13],
                std: vec![0.31],
            },
            classifier,
            adapter,
            metrics_json: "{\"curve\":[]}".into(),
        }
    }

    #[test]
    fn round_trip_preserves_every_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task2.frckpt");
        let original = sample_checkpoint(true);
        original.write(&path).unwrap();
        let loaded = TaskCheckpoint::read(&path).unwrap();

        assert_eq!(loaded.digest, original.digest);
        assert_eq!(loaded.task_index, original.task_index);
        assert_eq!(loaded.class_order, original.class_order);
        assert_eq!(loaded.class_layout, original.class_layout);
        assert_eq!(loaded.stats, original.stats);
        assert_eq!(loaded.metrics_json, original.metrics_json);
        assert_eq!(
            loaded.network.extractor.read_params(),
            original.network.extractor.read_params()
        );
        assert_eq!(
            loaded.network.extractor.specs(),
            original.network.extractor.specs()
        );
        assert_eq!(
            loaded.network.head.read_params(),
            original.network.head.read_params()
        );
        assert_eq!(loaded.network.head.eta(), original.network.head.eta());
        let lc = loaded.classifier.unwrap();
        let oc = original.classifier.unwrap();
        assert_eq!(lc.weight(), oc.weight());
        assert_eq!(lc.bias(), oc.bias());
        assert_eq!(lc.class_ids(), oc.class_ids());
        assert_eq!(
            loaded.adapter.unwrap().read_params(),
            original.adapter.unwrap().read_params()
        );
    }

    #[test]
    fn round_trip_without_optional_parts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task1.frckpt");
        let original = sample_checkpoint(false);
        original.write(&path).unwrap();
        let loaded = TaskCheckpoint::read(&path).unwrap();
        assert!(loaded.classifier.is_none());
        assert!(loaded.adapter.is_none());
        assert_eq!(
            loaded.network.head.read_params(),
            original.network.head.read_params()
        );
    }

    #[test]
    fn corrupt_and_missing_files_fail_loudly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.frckpt");
        assert!(matches!(
            TaskCheckpoint::read(&path).unwrap_err(),
            Error::MissingInput(_)
        ));

        sample_checkpoint(true).write(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            TaskCheckpoint::read(&path).unwrap_err(),
            Error::Format(_)
        ));

        std::fs::write(&path, b"FRMEM1whatever").unwrap();
        assert!(matches!(
            TaskCheckpoint::read(&path).unwrap_err(),
            Error::Format(_)
        ));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.frckpt");
        sample_checkpoint(false).write(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            TaskCheckpoint::read(&path).unwrap_err(),
            Error::Format(_)
        ));
    }
}

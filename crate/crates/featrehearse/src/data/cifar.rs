//! CIFAR-10 binary batch loading.
//!
//! Each record is 3073 bytes: one label byte followed by a 32x32 RGB image
//! stored plane by plane (all red, all green, all blue), which is exactly the
//! CHW layout used internally.

use super::dataset::{ImageShape, LabeledDataset};
use crate::error::{Error, Result};
use std::path::Path;

pub const CIFAR_SHAPE: ImageShape = ImageShape {
    channels: 3,
    height: 32,
    width: 32,
};

const RECORD: usize = 1 + 3 * 32 * 32;

/// Loads and concatenates one or more CIFAR binary batch files.
pub fn load_cifar_batches(paths: &[impl AsRef<Path>]) -> Result<LabeledDataset> {
    if paths.is_empty() {
        return Err(Error::EmptyDataset("no CIFAR batch files given".into()));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = match std::fs::read(p) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingInput(format!("{} does not exist", p.display())))
            }
            Err(e) => return Err(e.into()),
        };
        if bytes.is_empty() || bytes.len() % RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: {} bytes is not a whole number of {RECORD}-byte CIFAR records",
                p.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(RECORD) {
            labels.push(rec[0] as u32);
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    let class_count = labels.iter().copied().max().map_or(0, |m| m + 1);
    LabeledDataset::new(CIFAR_SHAPE, pixels, labels, class_count)
}

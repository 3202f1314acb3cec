//! Exact byte accounting for everything the pipeline persists across tasks.

use super::exemplars::ImageExemplarStore;
use super::store::FeatureMemory;
use serde::{Deserialize, Serialize};

/// Storage cost of the rehearsal state, in exact bytes. Descriptors are
/// 4-byte floats; exemplar images one byte per pixel; derived unit fields
/// are provided for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub descriptor_count: usize,
    pub descriptor_dim: usize,
    pub bytes_per_descriptor: u64,
    pub feature_bytes: u64,
    pub image_count: usize,
    pub bytes_per_image: u64,
    pub image_bytes: u64,
    pub total_bytes: u64,
    /// total_bytes / 2^20, rounded to one decimal.
    pub total_mib: f64,
}

pub const BYTES_PER_FLOAT: u64 = 4;

/// KiB (divisor 1024).
pub fn kib(bytes: u64) -> f64 {
    bytes as f64 / 1024.0
}

/// Decimal kB (divisor 1000).
pub fn kb(bytes: u64) -> f64 {
    bytes as f64 / 1000.0
}

/// MiB (divisor 2^20).
pub fn mib(bytes: u64) -> f64 {
    bytes as f64 / (1024.0 * 1024.0)
}

/// Round to one decimal place (reporting convention for MiB figures).
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

pub fn footprint(memory: &FeatureMemory, images: Option<&ImageExemplarStore>) -> FootprintReport {
    let descriptor_count = memory.total();
    let bytes_per_descriptor = memory.dim() as u64 * BYTES_PER_FLOAT;
    let feature_bytes = descriptor_count as u64 * bytes_per_descriptor;
    let (image_count, bytes_per_image) = match images {
        Some(store) => (store.total(), store.shape().pixel_count() as u64),
        None => (0, 0),
    };
    let image_bytes = image_count as u64 * bytes_per_image;
    let total_bytes = feature_bytes + image_bytes;
    FootprintReport {
        descriptor_count,
        descriptor_dim: memory.dim(),
        bytes_per_descriptor,
        feature_bytes,
        image_count,
        bytes_per_image,
        image_bytes,
        total_bytes,
        total_mib: round1(mib(total_bytes)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageShape;
    use crate::memory::{ExemplarImage, StoredDescriptor};

    const CIFAR: ImageShape = ImageShape {
        channels: 3,
        height: 32,
        width: 32,
    };

    fn filled_memory(dim: usize, classes: u32, per_class: usize) -> FeatureMemory {
        let mut mem = FeatureMemory::new(dim, per_class);
        for c in 0..classes {
            let descs = vec![
                StoredDescriptor {
                    vector: vec![0.5; dim],
                    adapt_count: 0,
                    source_index: None,
                };
                per_class
            ];
            mem.insert_class(c, descs).unwrap();
        }
        mem
    }

    #[test]
    fn one_512_dim_descriptor_is_2_kib() {
        let mem = filled_memory(512, 1, 1);
        let report = footprint(&mem, None);
        assert_eq!(report.bytes_per_descriptor, 2048);
        assert_eq!(report.total_bytes, 2048);
        assert_eq!(kib(report.total_bytes), 2.0);
    }

    #[test]
    fn one_cifar_image_is_3072_bytes() {
        let mut store = ImageExemplarStore::new(CIFAR, 1);
        store
            .insert_class(
                0,
                vec![ExemplarImage {
                    pixels: vec![0; CIFAR.pixel_count()],
                    source_index: 0,
                }],
            )
            .unwrap();
        let mem = FeatureMemory::new(512, 1); // empty
        let report = footprint(&mem, Some(&store));
        assert_eq!(report.image_bytes, 3072);
        assert!((kb(report.image_bytes) - 3.072).abs() < 1e-12);
    }

    #[test]
    fn sixty_four_cifar_images_are_192_kib() {
        let bytes = 64u64 * CIFAR.pixel_count() as u64;
        assert_eq!(bytes, 196_608);
        assert_eq!(kib(bytes), 192.0);
    }

    #[test]
    fn one_64_dim_descriptor_is_a_quarter_decimal_kb() {
        let mem = filled_memory(64, 1, 1);
        let report = footprint(&mem, None);
        assert_eq!(report.total_bytes, 256);
        assert!((kb(report.total_bytes) - 0.256).abs() < 1e-12);
    }

    #[test]
    fn dataset_scale_descriptor_store_mib_figures() {
        // 50k descriptors at 256 dims: 51_200_000 bytes = 48.828125 MiB.
        let bytes = 50_000u64 * 256 * BYTES_PER_FLOAT;
        assert_eq!(bytes, 51_200_000);
        assert!((mib(bytes) - 48.828125).abs() < 1e-12);
        assert_eq!(round1(mib(bytes)), 48.8);
        // Ten times that: 488.28125 MiB, reported as 488.3.
        assert_eq!(round1(mib(bytes * 10)), 488.3);
    }

    #[test]
    fn totals_combine_features_and_images() {
        let mem = filled_memory(64, 3, 5); // 15 * 256 B = 3840
        let mut store = ImageExemplarStore::new(CIFAR, 2);
        for c in 0..3 {
            store
                .insert_class(
                    c,
                    vec![
                        ExemplarImage {
                            pixels: vec![0; CIFAR.pixel_count()],
                            source_index: 0,
                        };
                        2
                    ],
                )
                .unwrap();
        }
        let report = footprint(&mem, Some(&store));
        assert_eq!(report.descriptor_count, 15);
        assert_eq!(report.feature_bytes, 3840);
        assert_eq!(report.image_count, 6);
        assert_eq!(report.image_bytes, 6 * 3072);
        assert_eq!(report.total_bytes, 3840 + 18_432);
    }
}

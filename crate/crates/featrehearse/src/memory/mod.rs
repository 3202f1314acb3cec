//! Rehearsal memory: per-class feature descriptors instead of raw images.

mod exemplars;
mod footprint;
mod herding;
mod snapshot;
mod store;

pub use exemplars::{ExemplarImage, ImageExemplarStore};
pub use footprint::{footprint, kb, kib, mib, round1, FootprintReport};
pub use herding::herding_select;
pub use snapshot::{
    read_exemplar_snapshot, read_memory_snapshot, write_exemplar_snapshot, write_memory_snapshot,
};
pub use store::{FeatureMemory, StoredDescriptor};

//! Dataset loading, task splitting, batching and preprocessing.

mod batches;
mod cifar;
mod dataset;
mod idx;
mod preprocess;
mod synthetic;
mod tasks;

pub use batches::{batches, shuffled_chunks};
pub use cifar::{load_cifar_batches, CIFAR_SHAPE};
pub use dataset::{ImageShape, ImageSource, LabeledDataset};
pub use idx::{load_idx_dataset, write_idx_dataset};
pub use preprocess::{augment_batch, gather_batch, gather_raw, normalize_batch, Augment, ChannelStats};
pub use synthetic::{synthetic_digits, SyntheticSpec};
pub use tasks::{split_tasks, stratified_holdout, TaskSplit, TaskStream};

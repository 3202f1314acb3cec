//! Class-incremental learning with feature rehearsal.
//!
//! Instead of storing raw exemplar images between tasks, the pipeline keeps
//! low-dimensional feature descriptors, adapts them across feature-space
//! drift with a small learned network, and trains a balanced classifier over
//! every class seen so far. The crate is organized as:
//!
//! - [`data`]: dataset loading (IDX, CIFAR binary, synthetic digits), task
//!   splitting, batching, preprocessing.
//! - [`model`]: feature extractor, cosine scoring head, feature adapter and
//!   the SGD optimizer, all generic over [`real::Real`] so gradient checks
//!   can run in f64.
//! - [`losses`]: classification, distillation and feature-drift losses with
//!   analytic gradients.
//! - [`memory`]: per-class descriptor store, herding selection, footprint
//!   accounting and snapshot files.
//! - [`adaptation`]: drift-pair construction and adapter training.
//! - [`classifier`]: balanced one-vs-rest linear classifier on descriptors.
//! - [`evaluation`]: accuracy curves, adaptation-quality diagnostics and the
//!   metrics artifacts.
//! - [`trainer`]: run orchestration, configuration and checkpointing.

pub mod adaptation;
pub(crate) mod binio;
pub mod classifier;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod memory;
pub mod model;
pub mod real;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

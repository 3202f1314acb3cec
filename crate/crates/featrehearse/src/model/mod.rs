//! Differentiable model components: feature extractor, cosine scoring head,
//! feature adapter and the SGD optimizer.

mod adapter;
mod extractor;
mod head;
mod init;
mod layers;
mod network;
mod sgd;

pub use adapter::{AdapterCache, AdapterNetwork};
pub use extractor::{default_cnn, identity_arch, Extractor, LayerSpec, Tape};
pub use head::{CosineHead, HeadCache, HeadGrads};
pub use init::fan_in_uniform;
pub use layers::{Conv2d, Dense};
pub use network::{normalize_rows, one_hot, Network};
pub use sgd::{Sgd, SgdConfig};

//! Neural networks for zero-shot voice style transfer: style encoding, the
//! hierarchical VAE over content and spectrogram features, the hierarchical
//! adaptive generator with source (pitch) modeling, and the adversarial
//! critics. Parameters live in seedable stores with bit-exact checkpointing.

pub mod checkpoint;
pub mod disc;
pub mod error;
pub mod hag;
pub mod hvae;
pub mod melspec;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod style;

pub use error::{ModelError, Result};
pub use model::{DiscSet, DtypeOpt, ModelConfig, VcModel};
pub use params::{ParamStore, TensorBag};
pub use rng::TrainRng;

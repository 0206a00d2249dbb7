//! Training, conversion and evaluation pipelines for the zero-shot voice
//! style transfer system.

pub mod config;
pub mod data;
pub mod error;
pub mod pipeline;
pub mod trainer;

pub use config::Config;
pub use error::{Error, Result};
pub use trainer::{LossBreakdown, TrainState};

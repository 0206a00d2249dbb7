//! Deterministic audio front-end and feature plumbing for the voice style
//! transfer system: WAV i/o, spectrograms, pitch tracking, information
//! perturbation, content-feature extraction and dataset manifests.

pub mod bundle;
pub mod content;
pub mod error;
pub mod manifest;
pub mod perturb;
pub mod pitch;
pub mod pvoc;
pub mod stft;
pub mod synth;
pub mod wave;

pub use bundle::{slice_aligned, AudioFrontend, FeatureBundle};
pub use content::{ContentExtractor, ContentFeatures, StubExtractor, CONTENT_HOP};
pub use error::{Error, Result};
pub use stft::{AudioConfig, Matrix, MelSpectrogram, Spectrogram, SpectrumAnalyzer};
pub use wave::{load_and_resample, load_wav, save_wav, Waveform};

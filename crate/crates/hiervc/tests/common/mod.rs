//! Shared helpers for integration tests: tiny configs and toy corpora.

use std::path::Path;

use hiervc::config::Config;
use hiervc_core::manifest::{build_manifest, Manifest};

/// Desk-scale config shrunk further for test runtime: short segments,
/// narrow stacks, tiny discriminators.
pub fn tiny_config() -> Config {
    let mut cfg = Config::desk_scale();
    cfg.content.feature_dim = 16;
    cfg.model.hvae.content_dim = 16;
    cfg.model.hvae.latent_dim = 8;
    cfg.model.hag.latent_dim = 8;
    cfg.model.hvae.encoder.hidden = 24;
    cfg.model.hvae.encoder.layers = 2;
    cfg.model.hvae.flow_wavenet.hidden = 16;
    cfg.model.hvae.flow_wavenet.layers = 1;
    cfg.model.hvae.prosody_hidden = 16;
    cfg.model.hvae.prosody_layers = 1;
    cfg.model.style.channels = 16;
    cfg.model.style.style_dim = 16;
    cfg.model.hvae.style_dim = 16;
    cfg.model.hag.style_dim = 16;
    cfg.model.hag.initial_channels = 32;
    cfg.model.hag.source_channels = 16;
    cfg.model.hag.f0_head_channels = 4;
    cfg.model.hag.mrf_kernels = vec![3];
    cfg.model.hag.mrf_dilations = vec![vec![1, 3]];
    cfg.model.disc.mpd_channels = vec![4, 8];
    cfg.model.disc.msstftd_channels = 4;
    cfg.model.disc.msstftd_layers = 2;
    cfg.train.batch_size = 1;
    cfg.train.segment_samples = 19_200;
    cfg.train.window_samples = 9_600;
    cfg.train.log_interval = 1000;
    cfg.train.checkpoint_interval = 0;
    cfg.validate().expect("tiny config is valid");
    cfg
}

/// Toy corpus on disk plus its manifest.
pub fn toy_corpus(dir: &Path, speakers: usize, utts: usize, samples: usize, seed: u64) -> Manifest {
    hiervc_core::synth::write_toy_corpus(dir, speakers, utts, samples, 16000, seed).unwrap();
    let (manifest, skip) = build_manifest(dir).unwrap();
    assert!(skip.skipped.is_empty());
    manifest
}

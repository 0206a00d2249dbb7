mod common;

use candle_core::Device;
use hiervc::data::TrainDataset;
use hiervc::trainer::TrainState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn single_step_runs_and_is_finite() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::toy_corpus(dir.path(), 2, 1, 19_200, 11);
    let cfg = common::tiny_config();
    let mut data_rng = ChaCha8Rng::seed_from_u64(1);
    let dataset = TrainDataset::load(&cfg, &manifest, &mut data_rng).unwrap();

    let mut state = TrainState::new(&cfg, &Device::Cpu).unwrap();
    let t0 = std::time::Instant::now();
    let seg = dataset.sample_segment(0, &mut data_rng).unwrap();
    let losses = state.train_step(&[seg]).unwrap();
    let dt = t0.elapsed();
    eprintln!("one step: {dt:?}; losses: {losses:?}");
    assert!(losses.is_finite());
    assert!(losses.stft > 0.0);
    assert_eq!(state.step, 1);
}

#[test]
fn total_is_weighted_sum_of_components() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::toy_corpus(dir.path(), 1, 1, 19_200, 12);
    let cfg = common::tiny_config();
    let mut data_rng = ChaCha8Rng::seed_from_u64(2);
    let dataset = TrainDataset::load(&cfg, &manifest, &mut data_rng).unwrap();
    let mut state = TrainState::new(&cfg, &Device::Cpu).unwrap();
    let seg = dataset.sample_segment(0, &mut data_rng).unwrap();
    let l = state.train_step(&[seg]).unwrap();
    let t = &cfg.train;
    let want = t.w_stft * l.stft
        + t.w_pitch * l.pitch
        + t.w_kl_ling * l.kl_linguistic
        + t.w_kl_acoustic * l.kl_acoustic
        + t.w_prosody * l.prosody
        + t.w_adv * l.adv_gen
        + t.w_feat_match * l.feat_match;
    let rel = (l.total_gen - want).abs() / want.abs().max(1e-9);
    assert!(rel < 1e-6, "total {} vs weighted sum {want}", l.total_gen);
    assert_eq!(l.total_disc, l.adv_disc);
}

mod common;

use candle_core::Device;
use hiervc::data::TrainDataset;
use hiervc::trainer::TrainState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
#[ignore]
fn profile_steps() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::toy_corpus(dir.path(), 2, 1, 19_200, 11);
    let cfg = common::tiny_config();
    let mut data_rng = ChaCha8Rng::seed_from_u64(1);
    let dataset = TrainDataset::load(&cfg, &manifest, &mut data_rng).unwrap();
    let mut state = TrainState::new(&cfg, &Device::Cpu).unwrap();

    // Warm-up.
    let seg = dataset.sample_segment(0, &mut data_rng).unwrap();
    state.train_step(&[seg]).unwrap();

    let t0 = std::time::Instant::now();
    let n = 10;
    let mut sample_time = std::time::Duration::ZERO;
    for _ in 0..n {
        let s0 = std::time::Instant::now();
        let seg = dataset.sample_segment(0, &mut data_rng).unwrap();
        sample_time += s0.elapsed();
        state.train_step(&[seg]).unwrap();
    }
    let dt = t0.elapsed();
    eprintln!(
        "{n} steps in {dt:?} => {:?}/step (data sampling {:?}/step)",
        dt / n,
        sample_time / n
    );
}

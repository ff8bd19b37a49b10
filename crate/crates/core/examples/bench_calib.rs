//! Scratch validation of the calibration-trend criterion (not shipped).
use gazelab::estimators::FrozenEstimator;
use gazelab::harness::calibrate::few_shot_calibration;
use gazelab::harness::checkpoint::Checkpoint;
use gazelab::synth::Dataset;
use std::fs;

fn main() {
    let t0 = std::time::Instant::now();
    let base = std::env::temp_dir();
    let ds = Dataset::open(&base.join("gzl_pilot_train")).unwrap();
    let ev: FrozenEstimator =
        serde_json::from_slice(&fs::read(base.join("gzl_pilot_evalnet.json")).unwrap()).unwrap();
    let ckpt = Checkpoint::load(&base.join("gzl_pilotb_run/checkpoint.bin")).unwrap();
    let curve = few_shot_calibration(&ckpt, &ds, &ev, 0, &[1, 2, 3, 4, 5], 50, 80, 1e-3, 3).unwrap();
    println!("{}", curve.to_tsv());
    println!("[{:?}] done", t0.elapsed());
}

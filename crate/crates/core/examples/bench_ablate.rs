//! Scratch validation of the ablation-trend criterion budget (not shipped).
use gazelab::estimators::{train_estimator, EstimatorRole, FrozenEstimator, IdentityEmbedder};
use gazelab::harness::ablation::run_ablation_matrix;
use gazelab::harness::config::TrainConfig;
use gazelab::synth::Dataset;
use std::fs;

fn main() {
    let t0 = std::time::Instant::now();
    let base = std::env::temp_dir();
    let ds = Dataset::open(&base.join("gzl_pilot_train")).unwrap();
    let ln: FrozenEstimator =
        serde_json::from_slice(&fs::read(base.join("gzl_pilot_lossnet.json")).unwrap()).unwrap();
    let em: IdentityEmbedder =
        serde_json::from_slice(&fs::read(base.join("gzl_pilot_embedder.json")).unwrap()).unwrap();
    let ev_path = base.join("gzl_pilot_evalnet.json");
    let ev: FrozenEstimator = if ev_path.exists() {
        serde_json::from_slice(&fs::read(&ev_path).unwrap()).unwrap()
    } else {
        let est_ds = Dataset::open(&base.join("dbg_est_data")).unwrap();
        let ev = train_estimator(&est_ds, EstimatorRole::EvalNet, 9).unwrap();
        fs::write(&ev_path, serde_json::to_vec(&ev).unwrap()).unwrap();
        ev
    };
    println!(
        "[{:?}] eval net gaze {:.2} head {:?}",
        t0.elapsed(),
        ev.validation_gaze_error_deg,
        ev.validation_head_error_deg
    );

    let mut base_cfg = TrainConfig::default();
    base_cfg.field.width = 64;
    base_cfg.field.depth = 4;
    base_cfg.field.skip_at = 2;
    base_cfg.learning_rate = 2e-4;
    base_cfg.background_weight = 0.3;
    base_cfg.seed = 1;
    base_cfg.steps = 700;
    base_cfg.rays_per_step = 512;
    base_cfg.checkpoint_every = 10_000;
    base_cfg.log_every = 10_000;
    let table = run_ablation_matrix(&base_cfg, &ds, Some(&ln), Some(&em), Some(&ev), 2, 77).unwrap();
    println!("{}", table.to_tsv());
    println!("[{:?}] done", t0.elapsed());
}

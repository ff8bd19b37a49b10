//! Scratch benchmark (not shipped).
use gazelab::estimators::{FrozenEstimator, IdentityEmbedder};
use gazelab::harness::config::TrainConfig;
use gazelab::harness::train::train;
use gazelab::synth::{generate_dataset, Dataset, GeneratorConfig};

fn main() {
    let dir = std::env::temp_dir().join("gzl_bench_data");
    if !dir.join("manifest.json").exists() {
        generate_dataset(8, 20, 1, &GeneratorConfig::default(), &dir).unwrap();
    }
    let ds = Dataset::open(&dir).unwrap();
    let ln = FrozenEstimator::random_untrained(64, 1);
    let em = IdentityEmbedder::random_untrained(64, 8, 2);
    let mut cfg = TrainConfig::default();
    cfg.steps = 10;
    cfg.field.width = 64;
    cfg.field.depth = 4;
    cfg.field.skip_at = 2;
    let t = std::time::Instant::now();
    let _ = train(&cfg, &ds, Some(&ln), Some(&em), None).unwrap();
    println!("10 steps w64 d4 + functional + perceptual: {:?}", t.elapsed());
}

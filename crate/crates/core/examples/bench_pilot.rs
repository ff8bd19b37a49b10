//! Scratch staged pilot of the end-to-end training criterion (not shipped).
//! Each invocation does at most one bounded chunk of work and exits, so the
//! whole run can be driven by a supervisor with a per-invocation time cap.
use gazelab::estimators::{train_estimator, train_identity_embedder, EstimatorRole, FrozenEstimator, IdentityEmbedder};
use gazelab::geometry::{angular_error, pitchyaw_to_vector, GazeAngles};
use gazelab::harness::checkpoint::Checkpoint;
use gazelab::harness::config::TrainConfig;
use gazelab::harness::model::GazeModel;
use gazelab::harness::train::train_from;
use gazelab::synth::{generate_dataset, oracle_gaze_from_image, render_ground_truth, Dataset, GeneratorConfig};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::fs;

const CHUNK: u64 = 1200;
const TOTAL: u64 = 5000;

fn main() {
    let t0 = std::time::Instant::now();
    let base = std::env::temp_dir();
    let train_dir = base.join("gzl_pilot_train");
    if !train_dir.join("manifest.json").exists() {
        generate_dataset(8, 20, 1, &GeneratorConfig::default(), &train_dir).unwrap();
    }
    let est_dir = base.join("dbg_est_data");
    if !est_dir.join("manifest.json").exists() {
        generate_dataset(10, 150, 41, &GeneratorConfig::default(), &est_dir).unwrap();
    }
    let ds = Dataset::open(&train_dir).unwrap();
    println!("[{:?}] data ready", t0.elapsed());

    let ln_path = base.join("gzl_pilot_lossnet.json");
    let em_path = base.join("gzl_pilot_embedder.json");
    if !ln_path.exists() {
        let est_ds = Dataset::open(&est_dir).unwrap();
        let ln = train_estimator(&est_ds, EstimatorRole::LossNet, 8).unwrap();
        println!("[{:?}] loss net {:.2} deg", t0.elapsed(), ln.validation_gaze_error_deg);
        fs::write(&ln_path, serde_json::to_vec(&ln).unwrap()).unwrap();
        println!("stage done: loss net");
        return;
    }
    if !em_path.exists() {
        let em = train_identity_embedder(&ds, 10).unwrap();
        println!("[{:?}] embedder acc {:.3}", t0.elapsed(), em.validation_accuracy);
        fs::write(&em_path, serde_json::to_vec(&em).unwrap()).unwrap();
        println!("stage done: embedder");
        return;
    }
    let ln: FrozenEstimator = serde_json::from_slice(&fs::read(&ln_path).unwrap()).unwrap();
    let em: IdentityEmbedder = serde_json::from_slice(&fs::read(&em_path).unwrap()).unwrap();

    let mut cfg = TrainConfig::default();
    cfg.field.width = 64;
    cfg.field.depth = 4;
    cfg.field.skip_at = 2;
    cfg.render.low_res = 32;
    cfg.render.upsample_stages = 1;
    cfg.learning_rate = 2e-4;
    cfg.background_weight = 0.3;
    cfg.seed = 1;
    cfg.steps = TOTAL;
    cfg.log_every = 200;
    cfg.checkpoint_every = 400;
    let out = base.join("gzl_pilotb_run");
    let ckpt_path = out.join("checkpoint.bin");
    let mut ckpt = if ckpt_path.exists() {
        Checkpoint::load(&ckpt_path).unwrap()
    } else {
        Checkpoint::fresh(cfg.clone(), GazeModel::init(&cfg, &ds).unwrap())
    };
    if ckpt.step < TOTAL {
        let target = (ckpt.step + CHUNK).min(TOTAL);
        ckpt.config.steps = target;
        let (done, log) = train_from(ckpt, &ds, Some(&ln), Some(&em), Some(&out)).unwrap();
        for l in &log {
            println!("step {} total {:.4} rw {:.4} re {:.4} f {:.4}", l.step, l.loss.total, l.loss.recon_whole, l.loss.recon_eyes, l.loss.functional);
        }
        println!("[{:?}] trained to {}", t0.elapsed(), done.step);
        if done.step < TOTAL {
            println!("stage done: train chunk");
            return;
        }
        ckpt = done;
    }

    // Final stage: held-out redirections, oracle gaze error + leakage.
    let mut rng = ChaCha8Rng::seed_from_u64(999);
    let gcfg = &ds.manifest.config;
    let mut errs = Vec::new();
    let mut leak_ratio = Vec::new();
    for trial in 0..16u32 {
        let sid = trial % 8;
        let gaze = GazeAngles::new(
            rng.gen_range(-0.6 * gcfg.gaze_range..0.6 * gcfg.gaze_range),
            rng.gen_range(-gcfg.gaze_range..gcfg.gaze_range),
        )
        .unwrap();
        let head = GazeAngles::new(
            rng.gen_range(-0.6 * gcfg.head_range..0.6 * gcfg.head_range),
            rng.gen_range(-gcfg.head_range..gcfg.head_range),
        )
        .unwrap();
        let pose = gazelab::synth::orbit_camera(head, gcfg.distance_mm);
        let intr = gcfg.intrinsics();
        let r = ckpt.model.render(&ckpt.model.latents[&sid], gaze, &pose, &intr, 7).unwrap();
        let subject = ds.subject(sid).unwrap();
        match oracle_gaze_from_image(&r.whole, subject, head, gcfg) {
            Ok(o) => errs.push(
                angular_error(&pitchyaw_to_vector(o), &pitchyaw_to_vector(gaze)).to_degrees(),
            ),
            Err(e) => println!("oracle failed: {e}"),
        }
        let gt = render_ground_truth(subject, gaze, head, gcfg).unwrap();
        let (mut inside, mut outside, mut n_in, mut n_out) = (0.0, 0.0, 0usize, 0usize);
        for i in 0..gcfg.resolution {
            for j in 0..gcfg.resolution {
                for c in 0..3 {
                    let v = r.eyes[[i, j, c]].abs();
                    if gt.mask_eyes[[i, j]] { inside += v; n_in += 1; } else { outside += v; n_out += 1; }
                }
            }
        }
        leak_ratio.push((outside / n_out as f64) / (inside / n_in as f64));
    }
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    let leak = leak_ratio.iter().sum::<f64>() / leak_ratio.len() as f64;
    println!("[{:?}] oracle gaze mean {:.3} deg over {} trials; leakage {:.4}", t0.elapsed(), mean, errs.len(), leak);
    println!("stage done: eval");
}

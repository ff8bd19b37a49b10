//! Command-line interface: dataset generation, training, latent
//! fine-tuning, redirection, evaluation, the ablation matrix, and few-shot
//! calibration.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 io
//! failure.

use clap::{Parser, Subcommand};
use gazelab::error::{Error, Result};
use gazelab::estimators::{
    train_estimator, train_identity_embedder, EstimatorRole, FrozenEstimator, IdentityEmbedder,
};
use gazelab::geometry::GazeAngles;
use gazelab::harness::ablation::run_ablation_matrix;
use gazelab::harness::calibrate::few_shot_calibration;
use gazelab::harness::checkpoint::Checkpoint;
use gazelab::harness::config::TrainConfig;
use gazelab::harness::train::{finetune_latents, redirect, train_from};
use gazelab::metrics::{evaluate_pairs, pair_samples};
use gazelab::pixels::save_png;
use gazelab::synth::{generate_dataset, Dataset, GeneratorConfig};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "gazelab", about = "Desk-scale gaze redirection lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic head dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        subjects: u32,
        #[arg(long, default_value_t = 20)]
        views: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML training configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        /// Directory holding (or receiving) the frozen estimator caches.
        #[arg(long)]
        estimators: Option<PathBuf>,
        /// Resume from this checkpoint instead of initializing fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune the latent codes of one dataset sample; writes JSON codes.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: usize,
        #[arg(long, default_value_t = 200)]
        steps: u64,
        #[arg(long, default_value_t = 1e-2)]
        learning_rate: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the redirection triplet for a target gaze; writes PNGs.
    Redirect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        subject: u32,
        /// Target gaze pitch/yaw, degrees.
        #[arg(long, default_value_t = 0.0)]
        pitch: f64,
        #[arg(long, default_value_t = 0.0)]
        yaw: f64,
        /// Head pose pitch/yaw, degrees.
        #[arg(long, default_value_t = 0.0)]
        head_pitch: f64,
        #[arg(long, default_value_t = 0.0)]
        head_yaw: f64,
        /// Latent codes JSON from `finetune` (defaults to trained codes).
        #[arg(long)]
        codes: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired redirection evaluation; writes a metric report and table.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        pairs: usize,
        #[arg(long, default_value_t = 13)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        finetune_steps: u64,
        #[arg(long)]
        estimators: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and compare the ablation variants; writes a TSV table.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        pairs: usize,
        #[arg(long, default_value_t = 13)]
        seed: u64,
        #[arg(long)]
        estimators: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Few-shot calibration curve for one subject; writes a TSV curve.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        subject: u32,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 3, 4, 5])]
        k: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        total: usize,
        #[arg(long, default_value_t = 300)]
        finetune_steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        learning_rate: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        estimators: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Loads a cached frozen network or trains and caches it.
fn cached<T, TrainFn>(dir: &Path, name: &str, train: TrainFn) -> Result<T>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
    TrainFn: FnOnce() -> Result<T>,
{
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    if path.exists() {
        return Ok(serde_json::from_slice(&std::fs::read(&path)?)?);
    }
    eprintln!("training frozen network {name} (cached at {})", path.display());
    let net = train()?;
    std::fs::write(&path, serde_json::to_vec(&net)?)?;
    Ok(net)
}

fn loss_net(dir: &Path, dataset: &Dataset) -> Result<FrozenEstimator> {
    cached(dir, "loss_net.json", || {
        train_estimator(dataset, EstimatorRole::LossNet, 8)
    })
}

fn eval_net(dir: &Path, dataset: &Dataset) -> Result<FrozenEstimator> {
    cached(dir, "eval_net.json", || {
        train_estimator(dataset, EstimatorRole::EvalNet, 9)
    })
}

fn embedder_net(dir: &Path, dataset: &Dataset) -> Result<IdentityEmbedder> {
    cached(dir, "embedder.json", || train_identity_embedder(dataset, 10))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            subjects,
            views,
            seed,
            resolution,
        } => {
            let cfg = GeneratorConfig {
                resolution,
                ..GeneratorConfig::default()
            };
            let manifest = generate_dataset(subjects, views, seed, &cfg, &out)?;
            println!(
                "wrote {} samples ({} subjects x {} views) to {}",
                manifest.samples.len(),
                manifest.n_subjects,
                manifest.views_per_subject,
                out.display()
            );
        }
        Command::Train {
            data,
            out,
            config,
            seed,
            steps,
            estimators,
            resume,
        } => {
            let dataset = Dataset::open(&data)?;
            let ckpt = match resume {
                Some(path) => Checkpoint::load(&path)?,
                None => {
                    let mut cfg = match config {
                        Some(path) => TrainConfig::load_toml(&path)?,
                        None => TrainConfig::default(),
                    };
                    if let Some(seed) = seed {
                        cfg.seed = seed;
                    }
                    if let Some(steps) = steps {
                        cfg.steps = steps;
                    }
                    cfg.validate()?;
                    let model = gazelab::harness::model::GazeModel::init(&cfg, &dataset)?;
                    Checkpoint::fresh(cfg, model)
                }
            };
            let est_dir = estimators.unwrap_or_else(|| out.clone());
            let ln = if ckpt.config.ablation.functional {
                Some(loss_net(&est_dir, &dataset)?)
            } else {
                None
            };
            let em = if ckpt.config.ablation.perceptual {
                Some(embedder_net(&est_dir, &dataset)?)
            } else {
                None
            };
            let (ckpt, log) = train_from(ckpt, &dataset, ln.as_ref(), em.as_ref(), Some(&out))?;
            println!(
                "trained to step {} (final loss {:.5}); checkpoint at {}",
                ckpt.step,
                log.last().map(|l| l.loss.total).unwrap_or(f64::NAN),
                out.join("checkpoint.bin").display()
            );
        }
        Command::Finetune {
            checkpoint,
            data,
            index,
            steps,
            learning_rate,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dataset = Dataset::open(&data)?;
            let sample = dataset.load(index)?;
            let start = ckpt
                .model
                .latents
                .get(&sample.subject_id)
                .cloned()
                .map(Ok)
                .unwrap_or_else(|| {
                    Ok::<_, Error>(gazelab::field::init_latents_from_subject(
                        dataset.subject(sample.subject_id)?,
                        0.0,
                        ckpt.config.seed,
                    ))
                })?;
            let codes = finetune_latents(&ckpt.model, &start, &sample, steps, learning_rate, None)?;
            std::fs::write(&out, serde_json::to_vec_pretty(&codes)?)?;
            println!("wrote fine-tuned codes to {}", out.display());
        }
        Command::Redirect {
            checkpoint,
            data,
            subject,
            pitch,
            yaw,
            head_pitch,
            head_yaw,
            codes,
            seed,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dataset = Dataset::open(&data)?;
            let codes = match codes {
                Some(path) => serde_json::from_slice(&std::fs::read(&path)?)?,
                None => ckpt
                    .model
                    .latents
                    .get(&subject)
                    .cloned()
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!("no trained latents for subject {subject}"))
                    })?,
            };
            let gaze = GazeAngles::new(pitch.to_radians(), yaw.to_radians())?;
            let head = GazeAngles::new(head_pitch.to_radians(), head_yaw.to_radians())?;
            let intrinsics = dataset.manifest.config.intrinsics();
            let triplet = redirect(&ckpt.model, &codes, gaze, head, &intrinsics, seed)?;
            std::fs::create_dir_all(&out)?;
            save_png(&triplet.whole, &out.join("whole.png"))?;
            save_png(&triplet.face, &out.join("face.png"))?;
            save_png(&triplet.eyes, &out.join("eyes.png"))?;
            println!("wrote whole/face/eyes PNGs to {}", out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            pairs,
            seed,
            finetune_steps,
            estimators,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dataset = Dataset::open(&data)?;
            let est_dir = estimators.unwrap_or_else(|| out.clone());
            let ev = eval_net(&est_dir, &dataset)?;
            let em = embedder_net(&est_dir, &dataset)?;
            let ln_fp = loss_net(&est_dir, &dataset).ok().map(|n| n.fingerprint());
            let pairing = pair_samples(&dataset.manifest, pairs, seed);
            let model = |input: &gazelab::synth::SceneSample,
                         target: &gazelab::synth::SceneSample|
             -> Result<gazelab::pixels::ImageGrid> {
                let start = ckpt.model.latents.get(&input.subject_id).cloned().ok_or_else(
                    || Error::InvalidArgument(format!("no latents for subject {}", input.subject_id)),
                )?;
                let codes =
                    finetune_latents(&ckpt.model, &start, input, finetune_steps, 1e-2, None)?;
                Ok(ckpt
                    .model
                    .render(&codes, target.gaze, &target.camera, &target.intrinsics, seed)?
                    .whole)
            };
            let report = evaluate_pairs(&dataset, &pairing, model, &ev, &em, ln_fp)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
            std::fs::write(out.join("report.tsv"), report.to_table())?;
            print!("{}", report.to_table());
        }
        Command::Ablate {
            data,
            config,
            pairs,
            seed,
            estimators,
            out,
        } => {
            let dataset = Dataset::open(&data)?;
            let base = match config {
                Some(path) => TrainConfig::load_toml(&path)?,
                None => TrainConfig::default(),
            };
            let est_dir = estimators.unwrap_or_else(|| out.clone());
            let needs_loss = true; // some variants keep the functional term
            let ln = if needs_loss {
                Some(loss_net(&est_dir, &dataset)?)
            } else {
                None
            };
            let em = Some(embedder_net(&est_dir, &dataset)?);
            let ev = eval_net(&est_dir, &dataset)?;
            let table = run_ablation_matrix(
                &base,
                &dataset,
                ln.as_ref(),
                em.as_ref(),
                Some(&ev),
                pairs,
                seed,
            )?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("ablation.tsv"), table.to_tsv())?;
            std::fs::write(out.join("ablation.json"), serde_json::to_vec_pretty(&table)?)?;
            print!("{}", table.to_tsv());
        }
        Command::Calibrate {
            checkpoint,
            data,
            subject,
            k,
            total,
            finetune_steps,
            learning_rate,
            seed,
            estimators,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dataset = Dataset::open(&data)?;
            let est_dir = estimators.unwrap_or_else(|| out.clone());
            let ev = eval_net(&est_dir, &dataset)?;
            let curve = few_shot_calibration(
                &ckpt,
                &dataset,
                &ev,
                subject,
                &k,
                total,
                finetune_steps,
                learning_rate,
                seed,
            )?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("calibration.tsv"), curve.to_tsv())?;
            std::fs::write(out.join("calibration.json"), serde_json::to_vec_pretty(&curve)?)?;
            print!("{}", curve.to_tsv());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

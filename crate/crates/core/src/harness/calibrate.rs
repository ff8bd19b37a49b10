//! Few-shot personal calibration: fine-tuning a gaze estimator for one
//! subject from `k` real samples, optionally augmented with model-generated
//! redirections up to a fixed total.

use crate::error::{Error, Result};
use crate::estimators::{finetune_gaze_estimator, gaze_error_deg, FrozenEstimator};
use crate::geometry::GazeAngles;
use crate::harness::checkpoint::Checkpoint;
use crate::pixels::ImageGrid;
use crate::synth::Dataset;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Errors of the two fine-tuning regimes at one `k`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CalibrationPoint {
    pub k_real: usize,
    /// Held-out gaze error after fine-tuning on the real samples only.
    pub real_only_deg: f64,
    /// Held-out gaze error after fine-tuning on real plus generated samples.
    pub augmented_deg: f64,
}

/// The error curve over the configured `k` values.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CalibrationCurve {
    pub subject_id: u32,
    pub total: usize,
    pub points: Vec<CalibrationPoint>,
}

impl CalibrationCurve {
    /// Tab-separated table of the curve.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("k\tReal Only\tAugmented\n");
        for p in &self.points {
            out.push_str(&format!(
                "{}\t{:.4}\t{:.4}\n",
                p.k_real, p.real_only_deg, p.augmented_deg
            ));
        }
        out
    }
}

/// Runs the calibration experiment for one subject.
///
/// The subject's views are shuffled by the seed; the first half is the
/// sampling pool for real calibration data, the second half is the held-out
/// evaluation set. The augmented regime tops the `k` real samples up to
/// `total` with renders of the trained model at seed-drawn gazes, labeled by
/// the requested gaze. `k = total` admits no generated samples, so both
/// regimes coincide exactly.
#[allow(clippy::too_many_arguments)]
pub fn few_shot_calibration(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    eval_net: &FrozenEstimator,
    subject_id: u32,
    k_values: &[usize],
    total: usize,
    finetune_steps: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<CalibrationCurve> {
    let views = dataset.manifest.views_per_subject as usize;
    if subject_id >= dataset.manifest.n_subjects {
        return Err(Error::InvalidArgument(format!(
            "subject {subject_id} outside dataset"
        )));
    }
    if k_values.iter().any(|k| *k == 0 || *k > total) {
        return Err(Error::InvalidArgument(
            "every k must satisfy 1 <= k <= total".into(),
        ));
    }
    let codes = ckpt
        .model
        .latents
        .get(&subject_id)
        .ok_or_else(|| Error::InvalidArgument(format!("no latents for subject {subject_id}")))?;

    let mut order: Vec<usize> = (0..views).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xCA1B);
    order.shuffle(&mut rng);
    let pool: Vec<usize> = order[..views / 2].to_vec();
    let eval_idx: Vec<usize> = order[views / 2..].to_vec();
    let max_k = *k_values.iter().max().expect("non-empty k list");
    if pool.len() < max_k {
        return Err(Error::InvalidArgument(format!(
            "subject has only {} pool views for k up to {max_k}",
            pool.len()
        )));
    }

    let load = |view: usize| dataset.load(subject_id as usize * views + view);
    let mut eval_images = Vec::new();
    let mut eval_gazes = Vec::new();
    for &v in &eval_idx {
        let s = load(v)?;
        eval_images.push(s.image);
        eval_gazes.push(s.gaze);
    }

    let gen_cfg = &dataset.manifest.config;
    let mut points = Vec::new();
    for &k in k_values {
        let mut real_images: Vec<ImageGrid> = Vec::with_capacity(k);
        let mut real_gazes: Vec<GazeAngles> = Vec::with_capacity(k);
        let mut real_samples = Vec::with_capacity(k);
        for &v in &pool[..k] {
            let s = load(v)?;
            real_images.push(s.image.clone());
            real_gazes.push(s.gaze);
            real_samples.push(s);
        }

        let tuned_real = finetune_gaze_estimator(
            eval_net,
            &real_images,
            &real_gazes,
            finetune_steps,
            learning_rate,
            seed,
        )?;
        let real_only_deg = gaze_error_deg(&tuned_real, &eval_images, &eval_gazes)?;

        let mut aug_images = real_images.clone();
        let mut aug_gazes = real_gazes.clone();
        let mut gen_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6E4E ^ k as u64);
        for g in 0..total - k {
            let gaze = GazeAngles::new(
                gen_rng.gen_range(-0.6 * gen_cfg.gaze_range..0.6 * gen_cfg.gaze_range),
                gen_rng.gen_range(-gen_cfg.gaze_range..gen_cfg.gaze_range),
            )?;
            let anchor = &real_samples[g % real_samples.len()];
            let render = ckpt.model.render(
                codes,
                gaze,
                &anchor.camera,
                &anchor.intrinsics,
                seed ^ g as u64,
            )?;
            aug_images.push(render.whole);
            aug_gazes.push(gaze);
        }
        let tuned_aug = finetune_gaze_estimator(
            eval_net,
            &aug_images,
            &aug_gazes,
            finetune_steps,
            learning_rate,
            seed,
        )?;
        let augmented_deg = gaze_error_deg(&tuned_aug, &eval_images, &eval_gazes)?;

        points.push(CalibrationPoint {
            k_real: k,
            real_only_deg,
            augmented_deg,
        });
    }
    Ok(CalibrationCurve {
        subject_id,
        total,
        points,
    })
}

//! Evaluation metric suite: SSIM, PSNR, Fréchet feature distance, identity
//! similarity, and the paired redirection evaluation protocol.
//!
//! All metrics are deterministic given frozen networks and seeds.  The
//! Fréchet distance is computed over the evaluation network's penultimate
//! features rather than a pretrained classifier and is therefore named
//! `fid_proxy` throughout; its values are not comparable with published FID
//! numbers.  Identity similarity is cosine similarity of embedding vectors
//! scaled by 100 — a proxy for face-recognition similarity scores, not the
//! same model.

use crate::error::{Error, Result};
use crate::estimators::{FrozenEstimator, IdentityEmbedder};
use crate::geometry::{angular_error, pitchyaw_to_vector};
use crate::pixels::ImageGrid;
use crate::synth::{Dataset, DatasetManifest, SceneSample};
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Stabilizer constant `k1` of the SSIM luminance term.
const SSIM_K1: f64 = 0.01;
/// Stabilizer constant `k2` of the SSIM contrast/structure term.
const SSIM_K2: f64 = 0.03;
/// SSIM window side length in pixels.
const SSIM_WINDOW: usize = 8;
/// PSNR value reported for exact matches (avoids infinities in reports).
const PSNR_CAP_DB: f64 = 100.0;
/// Ridge added to feature covariances before the matrix square root.
const FID_EPSILON: f64 = 1e-6;

/// Aggregated evaluation results in the column order of the comparison
/// tables: gaze error, head-pose error, SSIM, PSNR, Fréchet feature
/// distance, identity similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean angular gaze error in degrees (lower is better).
    pub gaze_error: f64,
    /// Mean angular head-pose error in degrees (lower is better).
    pub head_error: f64,
    /// Mean structural similarity in `[-1, 1]` (higher is better).
    pub ssim: f64,
    /// Mean peak signal-to-noise ratio in dB, capped at 100.
    pub psnr: f64,
    /// Fréchet distance between prediction and target feature clouds.
    pub fid_proxy: f64,
    /// Mean cosine similarity of identity embeddings, scaled by 100.
    pub identity_similarity: f64,
}

impl MetricReport {
    /// Renders the report as a tab-separated table with a header row
    /// matching the comparison-table column names.
    pub fn to_table(&self) -> String {
        format!(
            "Gaze\tHead Pose\tSSIM\tPSNR\tFID\tIdentity Similarity\n\
             {:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
            self.gaze_error, self.head_error, self.ssim, self.psnr, self.fid_proxy, self.identity_similarity
        )
    }
}

fn check_same_shape(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "image shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Single-scale SSIM with uniform 8x8 sliding windows, dynamic range 1,
/// averaged over window positions and channels.
///
/// Images smaller than the window along an axis use the full extent of that
/// axis as the window.
pub fn ssim(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    check_same_shape(a, b)?;
    let (h, w, channels) = a.dim();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let wh = SSIM_WINDOW.min(h);
    let ww = SSIM_WINDOW.min(w);
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..channels {
        for i0 in 0..=(h - wh) {
            for j0 in 0..=(w - ww) {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in i0..i0 + wh {
                    for j in j0..j0 + ww {
                        let (x, y) = (a[[i, j, c]], b[[i, j, c]]);
                        sa += x;
                        sb += y;
                        saa += x * x;
                        sbb += y * y;
                        sab += x * y;
                    }
                }
                let (mu_a, mu_b) = (sa / n, sb / n);
                let var_a = saa / n - mu_a * mu_a;
                let var_b = sbb / n - mu_b * mu_b;
                let cov = sab / n - mu_a * mu_b;
                let value = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                total += value;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Peak signal-to-noise ratio in dB for unit dynamic range:
/// `10 * log10(1 / MSE)`, capped at 100 dB (the declared value for exact
/// matches).
pub fn psnr(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    check_same_shape(a, b)?;
    let diff = a - b;
    let mse = diff.mapv(|d| d * d).mean().unwrap_or(0.0);
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Cosine similarity of two feature vectors scaled by 100.
///
/// Exposed separately from [`identity_similarity`] so constructed embedding
/// fixtures can bypass the network.
pub fn cosine_similarity_100(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::NotEstimable(
            "identity similarity undefined for a zero embedding".into(),
        ));
    }
    Ok(100.0 * a.dot(&b) / (na * nb))
}

/// `100 * cosine(embed(a), embed(b))` under the frozen identity embedder.
pub fn identity_similarity(a: &ImageGrid, b: &ImageGrid, embedder: &IdentityEmbedder) -> Result<f64> {
    let ea = embedder.embed(a)?;
    let eb = embedder.embed(b)?;
    cosine_similarity_100(ea.view(), eb.view())
}

fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let sqrt_vals = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * sqrt_vals * eig.eigenvectors.transpose()
}

fn mean_and_covariance(features: &Array2<f64>) -> (Array1<f64>, DMatrix<f64>) {
    let (n, d) = features.dim();
    let mu = features.mean_axis(Axis(0)).expect("non-empty feature set");
    let mut cov = DMatrix::zeros(d, d);
    for row in features.rows() {
        let centered: Vec<f64> = row.iter().zip(mu.iter()).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    cov /= (n - 1) as f64;
    // Ridge regularization keeps the matrix square root well defined for
    // singular covariances (small sets, collinear features).
    for i in 0..d {
        cov[(i, i)] += FID_EPSILON;
    }
    (mu, cov)
}

/// Fréchet distance `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`
/// between the Gaussians fitted to two feature clouds.
///
/// The cross term is evaluated as `tr((S_a^{1/2} S_b S_a^{1/2})^{1/2})`,
/// which is symmetric and keeps every matrix square root on a symmetric
/// positive-semidefinite argument.
pub fn frechet_distance(features_a: &Array2<f64>, features_b: &Array2<f64>) -> Result<f64> {
    if features_a.nrows() < 2 || features_b.nrows() < 2 {
        return Err(Error::InvalidArgument(
            "Fréchet distance needs at least 2 samples per set".into(),
        ));
    }
    if features_a.ncols() != features_b.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "feature dimensions differ: {} vs {}",
            features_a.ncols(),
            features_b.ncols()
        )));
    }
    let (mu_a, cov_a) = mean_and_covariance(features_a);
    let (mu_b, cov_b) = mean_and_covariance(features_b);
    let mean_term = mu_a
        .iter()
        .zip(mu_b.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>();
    let sqrt_a = sqrtm_psd(&cov_a);
    let cross = sqrtm_psd(&(&sqrt_a * &cov_b * &sqrt_a));
    let trace_term = cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok((mean_term + trace_term).max(0.0))
}

/// Fréchet distance between two image sets under the evaluation network's
/// penultimate features.
pub fn fid_proxy(set_a: &[ImageGrid], set_b: &[ImageGrid], eval_net: &FrozenEstimator) -> Result<f64> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(Error::InvalidArgument(
            "fid_proxy needs at least 2 images per set".into(),
        ));
    }
    let embed_all = |set: &[ImageGrid]| -> Result<Array2<f64>> {
        let dim = eval_net.penultimate_features(&set[0])?.len();
        let mut out = Array2::zeros((set.len(), dim));
        for (i, img) in set.iter().enumerate() {
            out.row_mut(i).assign(&eval_net.penultimate_features(img)?);
        }
        Ok(out)
    };
    frechet_distance(&embed_all(set_a)?, &embed_all(set_b)?)
}

/// Deterministic per-subject pairing of dataset samples for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingManifest {
    pub seed: u64,
    /// `(input, target)` pairs as global sample indices.
    pub pairs: Vec<(usize, usize)>,
}

/// Randomly pairs views within each subject as `(input, target)`,
/// deterministically in the seed.
pub fn pair_samples(manifest: &DatasetManifest, pairs_per_subject: usize, seed: u64) -> PairingManifest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = manifest.views_per_subject as usize;
    let mut pairs = Vec::with_capacity(manifest.n_subjects as usize * pairs_per_subject);
    for subject in 0..manifest.n_subjects as usize {
        let base = subject * views;
        for _ in 0..pairs_per_subject {
            let input = base + rng.gen_range(0..views);
            let mut target = base + rng.gen_range(0..views);
            while views > 1 && target == input {
                target = base + rng.gen_range(0..views);
            }
            pairs.push((input, target));
        }
    }
    PairingManifest { seed, pairs }
}

/// Paired redirection evaluation: for each `(input, target)` pair the model
/// closure produces a redirected image from the input sample toward the
/// target sample's gaze and camera; the result is scored against the target
/// image.
///
/// Gaze and head-pose errors compare the evaluation network's predictions on
/// the rendered image against its predictions on the target image, so a
/// perfect render scores zero regardless of the network's own calibration.
/// `loss_net_fingerprint` enforces the self-grading firewall: evaluation
/// must not run with the same network that supplied the training-time
/// functional loss.
pub fn evaluate_pairs<F>(
    dataset: &Dataset,
    pairing: &PairingManifest,
    mut model: F,
    eval_net: &FrozenEstimator,
    embedder: &IdentityEmbedder,
    loss_net_fingerprint: Option<u64>,
) -> Result<MetricReport>
where
    F: FnMut(&SceneSample, &SceneSample) -> Result<ImageGrid>,
{
    if let Some(fp) = loss_net_fingerprint {
        if fp == eval_net.fingerprint() {
            return Err(Error::InvalidArgument(
                "self-grading firewall: eval net fingerprint equals loss net fingerprint".into(),
            ));
        }
    }
    if pairing.pairs.is_empty() {
        return Err(Error::InvalidArgument("empty pairing manifest".into()));
    }
    let n = pairing.pairs.len() as f64;
    let (mut gaze_sum, mut head_sum, mut ssim_sum, mut psnr_sum, mut id_sum) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut predictions = Vec::with_capacity(pairing.pairs.len());
    let mut targets = Vec::with_capacity(pairing.pairs.len());
    for &(input_idx, target_idx) in &pairing.pairs {
        let input = dataset.load(input_idx)?;
        let target = dataset.load(target_idx)?;
        let predicted = model(&input, &target)?;
        let g_pred = pitchyaw_to_vector(eval_net.predict_gaze(&predicted)?);
        let g_ref = pitchyaw_to_vector(eval_net.predict_gaze(&target.image)?);
        gaze_sum += angular_error(&g_pred, &g_ref).to_degrees();
        let h_pred = pitchyaw_to_vector(eval_net.predict_head_pose(&predicted)?);
        let h_ref = pitchyaw_to_vector(eval_net.predict_head_pose(&target.image)?);
        head_sum += angular_error(&h_pred, &h_ref).to_degrees();
        ssim_sum += ssim(&predicted, &target.image)?;
        psnr_sum += psnr(&predicted, &target.image)?;
        id_sum += identity_similarity(&predicted, &target.image, embedder)?;
        predictions.push(predicted);
        targets.push(target.image);
    }
    let fid = fid_proxy(&predictions, &targets, eval_net)?;
    Ok(MetricReport {
        gaze_error: gaze_sum / n,
        head_error: head_sum / n,
        ssim: ssim_sum / n,
        psnr: psnr_sum / n,
        fid_proxy: fid,
        identity_similarity: id_sum / n,
    })
}

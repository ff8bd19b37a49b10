//! The ablation matrix: architecture variants (stream split, rotation) and
//! loss variants (dropping terms), trained with shared seeds and compared on
//! one shared evaluation pairing.

use crate::error::Result;
use crate::estimators::{FrozenEstimator, IdentityEmbedder};
use crate::geometry::{angular_error, pitchyaw_to_vector};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::TrainConfig;
use crate::harness::train::train;
use crate::metrics::{pair_samples, psnr, ssim, PairingManifest};
use crate::synth::Dataset;

/// One trained-and-evaluated variant. Failed runs keep their error message
/// and NaN metrics so the rest of the matrix survives.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub ok: bool,
    pub error: Option<String>,
    /// Eval-net gaze error of redirected renders, degrees (NaN without an
    /// eval net).
    pub gaze_error_deg: f64,
    /// Eval-net head-pose error, degrees (NaN without an eval net).
    pub head_error_deg: f64,
    pub ssim: f64,
    pub psnr: f64,
}

/// The full matrix plus the pairing every run shared.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub pairing: PairingManifest,
}

impl AblationTable {
    /// Tab-separated table in the comparison-table column order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("Variant\tGaze\tHead Pose\tSSIM\tPSNR\tStatus\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}\n",
                r.name,
                r.gaze_error_deg,
                r.head_error_deg,
                r.ssim,
                r.psnr,
                if r.ok { "ok" } else { "failed" }
            ));
        }
        out
    }

    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// The named flag combinations: six architecture variants, then four loss
/// variants on the full architecture. `full` doubles as the all-losses row.
pub fn variant_configs(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut out = Vec::new();
    let mut push = |name: &str, edit: &dyn Fn(&mut TrainConfig)| {
        let mut cfg = base.clone();
        edit(&mut cfg);
        out.push((name.to_string(), cfg));
    };
    // architecture variants
    push("full", &|_| {});
    push("no-rotation", &|c| c.ablation.rotation = false);
    push("vanilla", &|c| {
        c.ablation.two_stream = false;
        c.ablation.rotation = false;
    });
    push("vanilla-no-functional", &|c| {
        c.ablation.two_stream = false;
        c.ablation.rotation = false;
        c.ablation.functional = false;
    });
    push("no-perceptual", &|c| c.ablation.perceptual = false);
    push("no-disentangle", &|c| c.ablation.disentangle = false);
    // loss variants (full architecture)
    push("loss-recon-only", &|c| {
        c.ablation.perceptual = false;
        c.ablation.functional = false;
        c.ablation.disentangle = false;
    });
    push("loss-recon-perc", &|c| {
        c.ablation.functional = false;
        c.ablation.disentangle = false;
    });
    push("loss-recon-perc-func", &|c| c.ablation.disentangle = false);
    push("loss-all", &|_| {});
    out
}

/// Evaluates one trained checkpoint on the shared pairing: renders the
/// target gaze under the target camera with the subject's trained latents,
/// then scores gaze and head errors (eval-net prediction on the render vs
/// its prediction on the target image, so a perfect render scores zero),
/// SSIM, and PSNR.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    pairing: &PairingManifest,
    eval_net: Option<&FrozenEstimator>,
) -> Result<(f64, f64, f64, f64)> {
    let n = pairing.pairs.len() as f64;
    let (mut gaze_sum, mut head_sum, mut ssim_sum, mut psnr_sum) = (0.0, 0.0, 0.0, 0.0);
    for &(_input_idx, target_idx) in &pairing.pairs {
        let target = dataset.load(target_idx)?;
        let codes = &ckpt.model.latents[&target.subject_id];
        let render = ckpt.model.render(
            codes,
            target.gaze,
            &target.camera,
            &target.intrinsics,
            pairing.seed,
        )?;
        if let Some(net) = eval_net {
            let pred = pitchyaw_to_vector(net.predict_gaze(&render.whole)?);
            let want = pitchyaw_to_vector(net.predict_gaze(&target.image)?);
            gaze_sum += angular_error(&pred, &want).to_degrees();
            let pred = pitchyaw_to_vector(net.predict_head_pose(&render.whole)?);
            let want = pitchyaw_to_vector(net.predict_head_pose(&target.image)?);
            head_sum += angular_error(&pred, &want).to_degrees();
        } else {
            gaze_sum = f64::NAN;
            head_sum = f64::NAN;
        }
        ssim_sum += ssim(&render.whole, &target.image)?;
        psnr_sum += psnr(&render.whole, &target.image)?;
    }
    Ok((gaze_sum / n, head_sum / n, ssim_sum / n, psnr_sum / n))
}

/// Trains and evaluates every variant with the shared seed and pairing.
/// Per-run failures are isolated into their rows.
pub fn run_ablation_matrix(
    base: &TrainConfig,
    dataset: &Dataset,
    loss_net: Option<&FrozenEstimator>,
    embedder: Option<&IdentityEmbedder>,
    eval_net: Option<&FrozenEstimator>,
    pairs_per_subject: usize,
    pairing_seed: u64,
) -> Result<AblationTable> {
    let pairing = pair_samples(&dataset.manifest, pairs_per_subject, pairing_seed);
    let mut rows = Vec::new();
    for (name, cfg) in variant_configs(base) {
        let outcome = train(&cfg, dataset, loss_net, embedder, None).and_then(|(ckpt, _)| {
            evaluate_checkpoint(&ckpt, dataset, &pairing, eval_net)
        });
        rows.push(match outcome {
            Ok((gaze, head, s, p)) => AblationRow {
                name,
                ok: true,
                error: None,
                gaze_error_deg: gaze,
                head_error_deg: head,
                ssim: s,
                psnr: p,
            },
            Err(e) => AblationRow {
                name,
                ok: false,
                error: Some(e.to_string()),
                gaze_error_deg: f64::NAN,
                head_error_deg: f64::NAN,
                ssim: f64::NAN,
                psnr: f64::NAN,
            },
        });
    }
    Ok(AblationTable { rows, pairing })
}

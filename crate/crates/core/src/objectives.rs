//! The four-term training objective: masked pixel reconstruction,
//! perceptual feature matching, gaze content consistency through a frozen
//! estimator, and latent-code disentanglement regularization.
//!
//! Every term exists in two forms: a tape-building version used by the
//! trainer (gradients flow to the predicted images and latent codes; the
//! auxiliary networks are registered as constants) and a plain evaluation
//! wrapper returning scalars for tests and logging.

use crate::error::{Error, Result};
use crate::estimators::{FrozenEstimator, IdentityEmbedder};
use crate::field::{LatentCodes, LatentVars};
use crate::pixels::{ImageGrid, Mask};
use crate::tape::{Tape, Var};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// Extractor layers used by the perceptual term.
pub const PERCEPTUAL_LAYERS: [usize; 3] = [1, 2, 3];

/// Coefficients of the total objective and its sub-terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_p: f64,
    pub lambda_f: f64,
    pub lambda_d: f64,
    pub w_sh: f64,
    pub w_ex: f64,
    pub w_te: f64,
    pub w_il: f64,
    pub lambda_f_content: f64,
    pub lambda_f_content_increment_per_epoch: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_r: 1.0,
            lambda_p: 1.0,
            lambda_f: 1.0,
            lambda_d: 1.0,
            w_sh: 1e-3,
            w_ex: 1.0,
            w_te: 1e-3,
            w_il: 1e-3,
            lambda_f_content: 1e-3,
            lambda_f_content_increment_per_epoch: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_r,
            self.lambda_p,
            self.lambda_f,
            self.lambda_d,
            self.w_sh,
            self.w_ex,
            self.w_te,
            self.w_il,
            self.lambda_f_content,
            self.lambda_f_content_increment_per_epoch,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Content-consistency coefficient after the per-epoch increments.
    pub fn lambda_f_content_at_epoch(&self, epoch: u64) -> f64 {
        self.lambda_f_content + self.lambda_f_content_increment_per_epoch * epoch as f64
    }
}

/// One training step's loss breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub recon_whole: f64,
    pub recon_face: f64,
    pub recon_eyes: f64,
    pub perc_whole: f64,
    pub perc_face: f64,
    pub perc_eyes: f64,
    pub functional: f64,
    pub disentangle: f64,
}

impl LossReport {
    /// Recomputes the total from the per-term fields and the weights.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.lambda_r * (self.recon_whole + self.recon_face + self.recon_eyes)
            + w.lambda_p * (self.perc_whole + self.perc_face + self.perc_eyes)
            + w.lambda_f * self.functional
            + w.lambda_d * self.disentangle
    }
}

fn check_image_shapes(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b || a.len() != 3 || a[2] != 3 {
        return Err(Error::ShapeMismatch(format!("images {a:?} vs {b:?}")));
    }
    Ok(())
}

fn mask_channels(mask: &Mask) -> Array3<f64> {
    let (h, w) = mask.dim();
    Array3::from_shape_fn((h, w, 3), |(i, j, _)| if mask[[i, j]] { 1.0 } else { 0.0 })
}

/// Mean absolute difference over the masked pixels only; the denominator is
/// the mask pixel count times 3 channels. An empty mask contributes 0.
pub fn masked_l1_on_tape(tape: &mut Tape, pred: Var, target: Var, mask: &Mask) -> Result<Var> {
    let ps = tape.value(pred).shape().to_vec();
    check_image_shapes(&ps, tape.value(target).shape())?;
    if ps[0] != mask.dim().0 || ps[1] != mask.dim().1 {
        return Err(Error::ShapeMismatch("mask does not match image".into()));
    }
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Ok(tape.scalar(0.0));
    }
    let m = tape.constant(mask_channels(mask).into_dyn());
    let d = tape.sub(pred, target);
    let md = tape.mul(d, m);
    let a = tape.abs(md);
    let s = tape.sum(a);
    Ok(tape.scale(s, 1.0 / (3.0 * count as f64)))
}

/// Plain wrapper over [`masked_l1_on_tape`].
pub fn masked_l1(pred: &ImageGrid, target: &ImageGrid, mask: &Mask) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone().into_dyn());
    let t = tape.constant(target.clone().into_dyn());
    let v = masked_l1_on_tape(&mut tape, p, t, mask)?;
    Ok(tape.scalar_value(v))
}

/// Pixel-level reconstruction loss: whole face, face-without-eyes, and eye
/// regions against their masks, summed.
pub fn reconstruction_loss(
    i_wf: &ImageGrid,
    i_fwo: &ImageGrid,
    i_e: &ImageGrid,
    i_gt: &ImageGrid,
    m_wf: &Mask,
    m_f: &Mask,
    m_e: &Mask,
) -> Result<f64> {
    Ok(masked_l1(i_wf, i_gt, m_wf)? + masked_l1(i_fwo, i_gt, m_f)? + masked_l1(i_e, i_gt, m_e)?)
}

/// Perceptual distance: L1 between extractor activations of the two masked
/// images, each layer normalized by its element count, summed over layers.
pub fn perceptual_loss_on_tape(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    mask: &Mask,
    extractor: &IdentityEmbedder,
    layers: &[usize],
) -> Result<Var> {
    let ps = tape.value(pred).shape().to_vec();
    check_image_shapes(&ps, tape.value(target).shape())?;
    let m = tape.constant(mask_channels(mask).into_dyn());
    let mp = tape.mul(pred, m);
    let mt = tape.mul(target, m);
    let fp = extractor.perceptual_layers_on_tape(tape, mp, layers)?;
    let ft = extractor.perceptual_layers_on_tape(tape, mt, layers)?;
    let mut total = tape.scalar(0.0);
    for (p, t) in fp.into_iter().zip(ft) {
        let n = tape.value(t).len() as f64;
        let d = tape.sub(p, t);
        let a = tape.abs(d);
        let s = tape.sum(a);
        let s = tape.scale(s, 1.0 / n);
        total = tape.add(total, s);
    }
    Ok(total)
}

/// Plain wrapper over [`perceptual_loss_on_tape`].
pub fn perceptual_loss(
    pred: &ImageGrid,
    target: &ImageGrid,
    mask: &Mask,
    extractor: &IdentityEmbedder,
    layers: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone().into_dyn());
    let t = tape.constant(target.clone().into_dyn());
    let v = perceptual_loss_on_tape(&mut tape, p, t, mask, extractor, layers)?;
    Ok(tape.scalar_value(v))
}

/// Angle between the gaze vectors of two `(1, 2)` pitch-yaw variables. The
/// cosine is clamped fractionally inside `[-1, 1]` so identical inputs keep
/// a finite gradient (the residual angle is ~4.5e-5 rad).
pub fn angular_error_on_tape(tape: &mut Tape, a: Var, b: Var) -> Var {
    let vector = |tape: &mut Tape, g: Var| -> [Var; 3] {
        let p = tape.slice(g, 1, 0, 1);
        let y = tape.slice(g, 1, 1, 2);
        let (cp, sp) = (tape.cos(p), tape.sin(p));
        let (cy, sy) = (tape.cos(y), tape.sin(y));
        let cpsy = tape.mul(cp, sy);
        let cpcy = tape.mul(cp, cy);
        [tape.neg(cpsy), tape.neg(sp), tape.neg(cpcy)]
    };
    let va = vector(tape, a);
    let vb = vector(tape, b);
    let mut dot = tape.scalar(0.0);
    for (x, y) in va.into_iter().zip(vb) {
        let xy = tape.mul(x, y);
        let xy = tape.reshape(xy, &[1]);
        dot = tape.add(dot, xy);
    }
    let c = tape.clamp(dot, -1.0 + 1e-9, 1.0 - 1e-9);
    tape.acos(c)
}

/// Content-consistency loss: scaled angular error between the frozen gaze
/// estimator's readings of the prediction and the ground truth.
pub fn functional_loss_on_tape(
    tape: &mut Tape,
    i_wf: Var,
    i_gt: Var,
    gaze_net: &FrozenEstimator,
    lambda_f_content: f64,
) -> Result<Var> {
    let vars = gaze_net.net.register(tape, false);
    let (gp, _, _) = gaze_net.net.forward_on_tape(tape, &vars, i_wf)?;
    let vars = gaze_net.net.register(tape, false);
    let (gt, _, _) = gaze_net.net.forward_on_tape(tape, &vars, i_gt)?;
    let gp = tape.slice(gp, 1, 0, 2);
    let gt = tape.slice(gt, 1, 0, 2);
    let err = angular_error_on_tape(tape, gp, gt);
    Ok(tape.scale(err, lambda_f_content))
}

/// Plain wrapper over [`functional_loss_on_tape`].
pub fn functional_loss(
    i_wf: &ImageGrid,
    i_gt: &ImageGrid,
    gaze_net: &FrozenEstimator,
    lambda_f_content: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(i_wf.clone().into_dyn());
    let t = tape.constant(i_gt.clone().into_dyn());
    let v = functional_loss_on_tape(&mut tape, p, t, gaze_net, lambda_f_content)?;
    Ok(tape.scalar_value(v))
}

/// Keeps each latent code near its initialization:
/// `sum_* (w_* / dim(z_*)) ||z_* - z0_*||^2`.
pub fn disentanglement_loss_on_tape(
    tape: &mut Tape,
    latents: &LatentVars,
    codes: &LatentCodes,
    weights: &LossWeights,
) -> Var {
    let mut total = tape.scalar(0.0);
    let parts = [
        (latents.z_sh, &codes.z0_sh, weights.w_sh),
        (latents.z_ex, &codes.z0_ex, weights.w_ex),
        (latents.z_te, &codes.z0_te, weights.w_te),
        (latents.z_il, &codes.z0_il, weights.w_il),
    ];
    for (z, z0, w) in parts {
        let z0c = tape.constant(z0.clone().into_dyn());
        let d = tape.sub(z, z0c);
        let sq = tape.mul(d, d);
        let s = tape.sum(sq);
        let s = tape.scale(s, w / z0.len() as f64);
        total = tape.add(total, s);
    }
    total
}

/// Plain disentanglement loss of a code set against its own `z0`.
pub fn disentanglement_loss(codes: &LatentCodes, weights: &LossWeights) -> f64 {
    let mut tape = Tape::new();
    let vars = codes.register(&mut tape, false);
    let v = disentanglement_loss_on_tape(&mut tape, &vars, codes, weights);
    tape.scalar_value(v)
}

/// Builds the full objective on the tape and returns the total variable
/// together with the per-term breakdown at the current values.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_on_tape(
    tape: &mut Tape,
    i_wf: Var,
    i_fwo: Var,
    i_e: Var,
    target: &ImageGrid,
    m_wf: &Mask,
    m_f: &Mask,
    m_e: &Mask,
    latents: &LatentVars,
    codes: &LatentCodes,
    extractor: &IdentityEmbedder,
    gaze_net: &FrozenEstimator,
    weights: &LossWeights,
    epoch: u64,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let t = tape.constant(target.clone().into_dyn());
    let recon_whole = masked_l1_on_tape(tape, i_wf, t, m_wf)?;
    let recon_face = masked_l1_on_tape(tape, i_fwo, t, m_f)?;
    let recon_eyes = masked_l1_on_tape(tape, i_e, t, m_e)?;
    let perc_whole = perceptual_loss_on_tape(tape, i_wf, t, m_wf, extractor, &PERCEPTUAL_LAYERS)?;
    let perc_face = perceptual_loss_on_tape(tape, i_fwo, t, m_f, extractor, &PERCEPTUAL_LAYERS)?;
    let perc_eyes = perceptual_loss_on_tape(tape, i_e, t, m_e, extractor, &PERCEPTUAL_LAYERS)?;
    let functional = functional_loss_on_tape(
        tape,
        i_wf,
        t,
        gaze_net,
        weights.lambda_f_content_at_epoch(epoch),
    )?;
    let disentangle = disentanglement_loss_on_tape(tape, latents, codes, weights);

    let recon = {
        let a = tape.add(recon_whole, recon_face);
        tape.add(a, recon_eyes)
    };
    let perc = {
        let a = tape.add(perc_whole, perc_face);
        tape.add(a, perc_eyes)
    };
    let mut total = tape.scale(recon, weights.lambda_r);
    let p = tape.scale(perc, weights.lambda_p);
    total = tape.add(total, p);
    let f = {
        let f = tape.scale(functional, weights.lambda_f);
        tape.reshape(f, &[1])
    };
    total = tape.add(total, f);
    let d = tape.scale(disentangle, weights.lambda_d);
    total = tape.add(total, d);

    let report = LossReport {
        total: tape.scalar_value(total),
        recon_whole: tape.scalar_value(recon_whole),
        recon_face: tape.scalar_value(recon_face),
        recon_eyes: tape.scalar_value(recon_eyes),
        perc_whole: tape.scalar_value(perc_whole),
        perc_face: tape.scalar_value(perc_face),
        perc_eyes: tape.scalar_value(perc_eyes),
        functional: tape.scalar_value(functional),
        disentangle: tape.scalar_value(disentangle),
    };
    Ok((total, report))
}

/// Plain evaluation of the full objective.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    i_wf: &ImageGrid,
    i_fwo: &ImageGrid,
    i_e: &ImageGrid,
    target: &ImageGrid,
    m_wf: &Mask,
    m_f: &Mask,
    m_e: &Mask,
    codes: &LatentCodes,
    extractor: &IdentityEmbedder,
    gaze_net: &FrozenEstimator,
    weights: &LossWeights,
    epoch: u64,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let wf = tape.constant(i_wf.clone().into_dyn());
    let fwo = tape.constant(i_fwo.clone().into_dyn());
    let e = tape.constant(i_e.clone().into_dyn());
    let latents = codes.register(&mut tape, false);
    let (_, report) = total_loss_on_tape(
        &mut tape, wf, fwo, e, target, m_wf, m_f, m_e, &latents, codes, extractor, gaze_net,
        weights, epoch,
    )?;
    Ok(report)
}

//! Joint training of fields, decoder, and per-subject latents; inference
//! time latent fine-tuning; and gaze redirection.
//!
//! Every run is a pure function of (config, seeds, dataset bytes): batch
//! selection and ray jitter derive from the config seed and the step index,
//! so resumed runs are bit-exact continuations.

use crate::camera::DEFAULT_NORMALIZED_DISTANCE_MM;
use crate::error::{Error, Result};
use crate::estimators::{FrozenEstimator, IdentityEmbedder};
use crate::field::{LatentCodes, LatentVars};
use crate::geometry::GazeAngles;
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::TrainConfig;
use crate::harness::model::{ForwardImages, GazeModel, ModelVars, RenderedTriplet};
use crate::harness::optim::Adam;
use crate::objectives::{
    disentanglement_loss_on_tape, functional_loss_on_tape, masked_l1_on_tape,
    perceptual_loss_on_tape, LossReport, PERCEPTUAL_LAYERS,
};
use crate::pixels::Mask;
use crate::synth::{orbit_camera, Dataset, SceneSample};
use crate::tape::{Tape, Var};
use ndarray::ArrayD;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Derives an independent stream seed for one step of one purpose.
fn step_seed(seed: u64, step: u64, salt: u64) -> u64 {
    seed ^ (step.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt
}

fn invert(mask: &Mask) -> Mask {
    mask.mapv(|m| !m)
}

/// Assembles the training objective for one sample on the tape, honoring
/// the ablation flags, and adds the auxiliary background-to-black term that
/// pushes rendered pixels outside every mask toward black.
#[allow(clippy::too_many_arguments)]
fn sample_loss_on_tape(
    tape: &mut Tape,
    model: &GazeModel,
    imgs: &ForwardImages,
    sample: &SceneSample,
    latvars: &LatentVars,
    codes: &LatentCodes,
    cfg: &TrainConfig,
    epoch: u64,
    loss_net: Option<&FrozenEstimator>,
    embedder: Option<&IdentityEmbedder>,
) -> Result<(Var, LossReport)> {
    let target = tape.constant(sample.image.clone().into_dyn());
    let black = tape.constant(ArrayD::zeros(sample.image.clone().into_dyn().raw_dim()));
    let w = &cfg.weights;

    let mut report = LossReport {
        total: 0.0,
        recon_whole: 0.0,
        recon_face: 0.0,
        recon_eyes: 0.0,
        perc_whole: 0.0,
        perc_face: 0.0,
        perc_eyes: 0.0,
        functional: 0.0,
        disentangle: 0.0,
    };

    let mut terms: Vec<(Var, f64)> = Vec::new();
    let recon_whole = masked_l1_on_tape(tape, imgs.img_whole, target, &sample.mask_whole_face)?;
    report.recon_whole = tape.scalar_value(recon_whole);
    terms.push((recon_whole, w.lambda_r));
    let bg_whole = masked_l1_on_tape(tape, imgs.img_whole, black, &invert(&sample.mask_whole_face))?;
    terms.push((bg_whole, cfg.background_weight));

    if let (Some(face), Some(eyes)) = (imgs.img_face, imgs.img_eyes) {
        let recon_face = masked_l1_on_tape(tape, face, target, &sample.mask_face_only)?;
        report.recon_face = tape.scalar_value(recon_face);
        terms.push((recon_face, w.lambda_r));
        let recon_eyes = masked_l1_on_tape(tape, eyes, target, &sample.mask_eyes)?;
        report.recon_eyes = tape.scalar_value(recon_eyes);
        terms.push((recon_eyes, w.lambda_r));
        let bg_face = masked_l1_on_tape(tape, face, black, &invert(&sample.mask_face_only))?;
        terms.push((bg_face, cfg.background_weight));
        let bg_eyes = masked_l1_on_tape(tape, eyes, black, &invert(&sample.mask_eyes))?;
        terms.push((bg_eyes, cfg.background_weight));
    }

    if cfg.ablation.perceptual {
        let extractor = embedder.ok_or_else(|| {
            Error::Config("perceptual loss enabled but no identity embedder supplied".into())
        })?;
        let perc_whole = perceptual_loss_on_tape(
            tape,
            imgs.img_whole,
            target,
            &sample.mask_whole_face,
            extractor,
            &PERCEPTUAL_LAYERS,
        )?;
        report.perc_whole = tape.scalar_value(perc_whole);
        terms.push((perc_whole, w.lambda_p));
        if let (Some(face), Some(eyes)) = (imgs.img_face, imgs.img_eyes) {
            let perc_face = perceptual_loss_on_tape(
                tape,
                face,
                target,
                &sample.mask_face_only,
                extractor,
                &PERCEPTUAL_LAYERS,
            )?;
            report.perc_face = tape.scalar_value(perc_face);
            terms.push((perc_face, w.lambda_p));
            let perc_eyes = perceptual_loss_on_tape(
                tape,
                eyes,
                target,
                &sample.mask_eyes,
                extractor,
                &PERCEPTUAL_LAYERS,
            )?;
            report.perc_eyes = tape.scalar_value(perc_eyes);
            terms.push((perc_eyes, w.lambda_p));
        }
    }

    if cfg.ablation.functional {
        let net = loss_net.ok_or_else(|| {
            Error::Config("functional loss enabled but no gaze estimator supplied".into())
        })?;
        let functional = functional_loss_on_tape(
            tape,
            imgs.img_whole,
            target,
            net,
            w.lambda_f_content_at_epoch(epoch),
        )?;
        report.functional = tape.scalar_value(functional);
        let functional = tape.reshape(functional, &[1]);
        terms.push((functional, w.lambda_f));
    }

    if cfg.ablation.disentangle {
        let disentangle = disentanglement_loss_on_tape(tape, latvars, codes, w);
        report.disentangle = tape.scalar_value(disentangle);
        terms.push((disentangle, w.lambda_d));
    }

    let mut total = tape.scalar(0.0);
    for (term, weight) in terms {
        let scaled = tape.scale(term, weight);
        total = tape.add(total, scaled);
    }
    report.total = tape.scalar_value(total);
    let _ = model;
    Ok((total, report))
}

/// Tape variables of every trainable tensor, aligned with
/// `model.trainable_names()`. Latents of subjects other than the one in the
/// current sample are absent from the tape (`None` -> no gradient).
fn trainable_vars(
    model: &GazeModel,
    vars: &ModelVars,
    latvars: &LatentVars,
    subject_id: u32,
) -> Vec<Option<Var>> {
    let mut out = Vec::new();
    for field in [&vars.eyes, &vars.face] {
        for (w, b) in &field.layers {
            out.push(Some(*w));
            out.push(Some(*b));
        }
        out.push(Some(field.sigma_head.0));
        out.push(Some(field.sigma_head.1));
        out.push(Some(field.feature_head.0));
        out.push(Some(field.feature_head.1));
    }
    for (w, b) in &vars.decoder.stages {
        out.push(Some(*w));
        out.push(Some(*b));
    }
    out.push(Some(vars.decoder.head.0));
    out.push(Some(vars.decoder.head.1));
    for sid in model.latents.keys() {
        if *sid == subject_id {
            out.extend([
                Some(latvars.z_sh),
                Some(latvars.z_ex),
                Some(latvars.z_te),
                Some(latvars.z_il),
            ]);
        } else {
            out.extend([None; 4]);
        }
    }
    out
}

/// One logged line of the training loss trajectory.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LogLine {
    pub step: u64,
    pub loss: LossReport,
}

/// Initializes a fresh model and trains it for `cfg.steps`. See
/// [`train_from`] for the loop contract.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    loss_net: Option<&FrozenEstimator>,
    embedder: Option<&IdentityEmbedder>,
    out: Option<&Path>,
) -> Result<(Checkpoint, Vec<LogLine>)> {
    let model = GazeModel::init(cfg, dataset)?;
    train_from(Checkpoint::fresh(cfg.clone(), model), dataset, loss_net, embedder, out)
}

/// Runs the optimization loop from `ckpt.step` to `ckpt.config.steps`.
///
/// Per step: a seed-derived batch of samples is rendered, the flagged loss
/// terms are assembled, gradients are averaged over the batch, and one Adam
/// update with global-norm clipping is applied (parameters rounded to f32).
/// A non-finite loss aborts with a numeric error after saving the last good
/// state to `out`. Checkpoints and a JSON-lines log are written under `out`
/// when given.
pub fn train_from(
    mut ckpt: Checkpoint,
    dataset: &Dataset,
    loss_net: Option<&FrozenEstimator>,
    embedder: Option<&IdentityEmbedder>,
    out: Option<&Path>,
) -> Result<(Checkpoint, Vec<LogLine>)> {
    let cfg = ckpt.config.clone();
    cfg.validate()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let mut adam = Adam::new(cfg.learning_rate, Some(cfg.clip_norm));
    adam.restore(ckpt.opt_step, ckpt.opt_m.clone(), ckpt.opt_v.clone());
    let names = ckpt.model.trainable_names();
    let images_per_step = cfg.images_per_step();
    let mut log = Vec::new();

    let save_state = |ckpt: &mut Checkpoint, adam: &Adam, step: u64| -> Result<()> {
        let (opt_step, m, v) = adam.state();
        ckpt.opt_step = opt_step;
        ckpt.opt_m = m.to_vec();
        ckpt.opt_v = v.to_vec();
        ckpt.step = step;
        if let Some(dir) = out {
            ckpt.save(&dir.join("checkpoint.bin"))?;
        }
        Ok(())
    };

    for step in ckpt.step..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, step, 0xBA7C));
        let mut grad_sums: Vec<Option<ArrayD<f64>>> = vec![None; names.len()];
        let mut batch_report = LossReport {
            total: 0.0,
            recon_whole: 0.0,
            recon_face: 0.0,
            recon_eyes: 0.0,
            perc_whole: 0.0,
            perc_face: 0.0,
            perc_eyes: 0.0,
            functional: 0.0,
            disentangle: 0.0,
        };
        for image_i in 0..images_per_step {
            let idx = rng.gen_range(0..dataset.len());
            let sample = dataset.load(idx)?;
            let codes = ckpt.model.latents[&sample.subject_id].clone();
            let mut tape = Tape::new();
            let vars = ckpt.model.register(&mut tape, true);
            let latvars = codes.register(&mut tape, true);
            let imgs = ckpt.model.forward_on_tape(
                &mut tape,
                &vars,
                &latvars,
                sample.gaze,
                &sample.camera,
                &sample.intrinsics,
                step_seed(cfg.seed, step, 0x5A3E ^ image_i as u64),
            )?;
            let (total, report) = sample_loss_on_tape(
                &mut tape,
                &ckpt.model,
                &imgs,
                &sample,
                &latvars,
                &codes,
                &cfg,
                cfg.epoch_of_step(step),
                loss_net,
                embedder,
            )?;
            if !report.total.is_finite() {
                save_state(&mut ckpt, &adam, step)?;
                return Err(Error::Numeric(format!(
                    "non-finite loss {} at step {step}; last good checkpoint saved",
                    report.total
                )));
            }
            batch_report.total += report.total / images_per_step as f64;
            batch_report.recon_whole += report.recon_whole / images_per_step as f64;
            batch_report.recon_face += report.recon_face / images_per_step as f64;
            batch_report.recon_eyes += report.recon_eyes / images_per_step as f64;
            batch_report.perc_whole += report.perc_whole / images_per_step as f64;
            batch_report.perc_face += report.perc_face / images_per_step as f64;
            batch_report.perc_eyes += report.perc_eyes / images_per_step as f64;
            batch_report.functional += report.functional / images_per_step as f64;
            batch_report.disentangle += report.disentangle / images_per_step as f64;

            let grads = tape.backward(total);
            let var_map = trainable_vars(&ckpt.model, &vars, &latvars, sample.subject_id);
            for (slot, var) in grad_sums.iter_mut().zip(var_map) {
                if let Some(g) = var.and_then(|v| grads.get(v)) {
                    match slot {
                        Some(acc) => *acc += g,
                        None => *slot = Some(g.clone()),
                    }
                }
            }
        }

        let scale = 1.0 / images_per_step as f64;
        for g in grad_sums.iter_mut().flatten() {
            g.mapv_inplace(|x| x * scale);
        }
        let mut params: Vec<ArrayD<f64>> = names
            .iter()
            .map(|n| ckpt.model.tensor(n).expect("own name"))
            .collect();
        {
            let mut refs: Vec<&mut ArrayD<f64>> = params.iter_mut().collect();
            adam.step(&mut refs, &grad_sums);
        }
        for (name, value) in names.iter().zip(params) {
            ckpt.model.set_tensor(name, value)?;
        }

        let done = step + 1;
        if done % cfg.log_every == 0 || done == cfg.steps || step == 0 {
            log.push(LogLine {
                step: done,
                loss: batch_report,
            });
        }
        if done % cfg.checkpoint_every == 0 || done == cfg.steps {
            save_state(&mut ckpt, &adam, done)?;
        }
    }
    save_state(&mut ckpt, &adam, cfg.steps)?;
    if let Some(dir) = out {
        let mut text = String::new();
        for line in &log {
            text.push_str(&serde_json::to_string(line)?);
            text.push('\n');
        }
        std::fs::write(dir.join("log.jsonl"), text)?;
    }
    Ok((ckpt, log))
}

/// Optimizes ONLY the four latent codes against the reconstruction (and,
/// with an embedder, perceptual) losses on one reference sample. Network
/// weights stay frozen; `steps = 0` returns the start codes unchanged.
pub fn finetune_latents(
    model: &GazeModel,
    start: &LatentCodes,
    reference: &SceneSample,
    steps: u64,
    learning_rate: f64,
    embedder: Option<&IdentityEmbedder>,
) -> Result<LatentCodes> {
    let mut codes = start.clone();
    let mut cfg = TrainConfig {
        field: model.field_config,
        render: model.render_config,
        ..TrainConfig::default()
    };
    cfg.ablation.two_stream = model.two_stream;
    cfg.ablation.rotation = model.rotation;
    cfg.ablation.functional = false;
    cfg.ablation.perceptual = embedder.is_some();
    cfg.ablation.disentangle = false;
    let mut adam = Adam::new(learning_rate, Some(cfg.clip_norm));
    for step in 0..steps {
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, false);
        let latvars = codes.register(&mut tape, true);
        let imgs = model.forward_on_tape(
            &mut tape,
            &vars,
            &latvars,
            reference.gaze,
            &reference.camera,
            &reference.intrinsics,
            step_seed(0xF17E, step, 0),
        )?;
        let (total, report) =
            sample_loss_on_tape(&mut tape, model, &imgs, reference, &latvars, &codes, &cfg, 0, None, embedder)?;
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite fine-tuning loss at step {step}"
            )));
        }
        let grads = tape.backward(total);
        let handles = [latvars.z_sh, latvars.z_ex, latvars.z_te, latvars.z_il];
        let grad_list: Vec<Option<ArrayD<f64>>> =
            handles.iter().map(|v| grads.get(*v).cloned()).collect();
        let mut params = [
            codes.z_sh.clone().into_dyn(),
            codes.z_ex.clone().into_dyn(),
            codes.z_te.clone().into_dyn(),
            codes.z_il.clone().into_dyn(),
        ];
        {
            let mut refs: Vec<&mut ArrayD<f64>> = params.iter_mut().collect();
            adam.step(&mut refs, &grad_list);
        }
        codes.z_sh = params[0].clone().into_dimensionality().expect("1d");
        codes.z_ex = params[1].clone().into_dimensionality().expect("1d");
        codes.z_te = params[2].clone().into_dimensionality().expect("1d");
        codes.z_il = params[3].clone().into_dimensionality().expect("1d");
    }
    Ok(codes)
}

/// Renders the triplet for a target gaze under a head pose expressed as the
/// normalized orbit camera.
pub fn redirect(
    model: &GazeModel,
    codes: &LatentCodes,
    target_gaze: GazeAngles,
    head_pose: GazeAngles,
    intrinsics: &crate::camera::CameraIntrinsics,
    sample_seed: u64,
) -> Result<RenderedTriplet> {
    let pose = orbit_camera(head_pose, DEFAULT_NORMALIZED_DISTANCE_MM);
    model.render(codes, target_gaze, &pose, intrinsics, sample_seed)
}

/// Reconstruction-only loss of the model on one sample with fixed codes;
/// used by fine-tuning tests and the calibration harness.
pub fn reconstruction_on_sample(
    model: &GazeModel,
    codes: &LatentCodes,
    sample: &SceneSample,
    sample_seed: u64,
) -> Result<f64> {
    let r = model.render(codes, sample.gaze, &sample.camera, &sample.intrinsics, sample_seed)?;
    crate::objectives::masked_l1(&r.whole, &sample.image, &sample.mask_whole_face)
}

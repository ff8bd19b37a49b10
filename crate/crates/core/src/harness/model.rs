//! The trainable model bundle: two radiance fields, the shared decoder, and
//! per-subject latent codes, with named-tensor access for checkpointing and
//! optimization.

use crate::camera::{CameraIntrinsics, CameraPose};
use crate::compositor::{
    generate_rays, neural_render_on_tape, render_triplet_on_tape, sample_along_rays,
    volume_render_on_tape, DecoderParameters, RenderConfig,
};
use crate::error::{Error, Result};
use crate::field::{
    conditioning, field_forward_on_tape, init_latents_from_subject, FieldConfig, FieldParameters,
    FieldVars, LatentCodes, LatentVars,
};
use crate::geometry::{gaze_rotation_matrix, GazeAngles, RotationMatrix};
use crate::harness::config::TrainConfig;
use crate::pixels::ImageGrid;
use crate::synth::Dataset;
use crate::tape::{Tape, Var};
use ndarray::{ArrayD, IxDyn};
use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

/// All learnable state of one training run. Subject latents are keyed by
/// subject id in a sorted map so tensor enumeration is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeModel {
    pub field_config: FieldConfig,
    pub render_config: RenderConfig,
    /// Two-stream architecture flag (off = single-MLP vanilla form).
    pub two_stream: bool,
    /// Eye-feature rotation flag.
    pub rotation: bool,
    pub field_eyes: FieldParameters,
    pub field_face: FieldParameters,
    pub decoder: DecoderParameters,
    pub latents: BTreeMap<u32, LatentCodes>,
}

/// Registered tape handles of the network weights.
pub struct ModelVars {
    pub eyes: FieldVars,
    pub face: FieldVars,
    pub decoder: crate::compositor::DecoderVars,
}

/// One forward pass. Vanilla runs produce only the whole-face image.
pub struct ForwardImages {
    pub img_whole: Var,
    pub img_face: Option<Var>,
    pub img_eyes: Option<Var>,
}

/// Plain-array render triplet.
#[derive(Debug, Clone)]
pub struct RenderedTriplet {
    pub whole: ImageGrid,
    pub face: ImageGrid,
    pub eyes: ImageGrid,
}

fn round_f32(a: &mut ArrayD<f64>) {
    a.mapv_inplace(|v| v as f32 as f64);
}

impl GazeModel {
    /// Initializes weights and per-subject latents for every subject in the
    /// dataset. All tensors are rounded to f32 so the in-memory state equals
    /// the checkpoint representation from step zero.
    pub fn init(cfg: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let in_channels = cfg.field.feature_dim + 1;
        let mut latents = BTreeMap::new();
        for sid in 0..dataset.manifest.n_subjects {
            let subject = dataset.subject(sid)?;
            latents.insert(
                sid,
                init_latents_from_subject(subject, cfg.latent_noise, cfg.seed),
            );
        }
        let mut model = Self {
            field_config: cfg.field,
            render_config: cfg.render,
            two_stream: cfg.ablation.two_stream,
            rotation: cfg.ablation.rotation,
            field_eyes: FieldParameters::init(cfg.field, cfg.seed ^ 0xE1E5)?,
            field_face: FieldParameters::init(cfg.field, cfg.seed ^ 0xFACE)?,
            decoder: DecoderParameters::init(
                in_channels,
                cfg.render.decoder_hidden,
                cfg.render.upsample_stages,
                cfg.seed ^ 0xDEC0,
            ),
            latents,
        };
        model.round_all_to_f32();
        Ok(model)
    }

    /// Rounds every tensor to f32 precision in place.
    pub fn round_all_to_f32(&mut self) {
        for name in self.tensor_names() {
            let mut t = self.tensor(&name).expect("own name");
            round_f32(&mut t);
            self.set_tensor(&name, t).expect("own shape");
        }
    }

    fn field_names(prefix: &str, cfg: &FieldConfig) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..cfg.depth {
            out.push(format!("{prefix}.layer{i}.weight"));
            out.push(format!("{prefix}.layer{i}.bias"));
        }
        for head in ["sigma_head", "feature_head"] {
            out.push(format!("{prefix}.{head}.weight"));
            out.push(format!("{prefix}.{head}.bias"));
        }
        out
    }

    /// Every tensor name, in the canonical (deterministic) order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Self::field_names("field_eyes", &self.field_config);
        out.extend(Self::field_names("field_face", &self.field_config));
        for i in 0..self.decoder.stages.len() {
            out.push(format!("decoder.stage{i}.weight"));
            out.push(format!("decoder.stage{i}.bias"));
        }
        out.push("decoder.head.weight".into());
        out.push("decoder.head.bias".into());
        for sid in self.latents.keys() {
            for code in ["z_sh", "z_ex", "z_te", "z_il", "z0_sh", "z0_ex", "z0_te", "z0_il"] {
                out.push(format!("latent.{sid}.{code}"));
            }
        }
        out
    }

    /// Names of the tensors the optimizer updates, in optimizer order.
    /// Frozen `z0` codes are excluded; the eye field is listed even in
    /// vanilla runs (it simply receives no gradients there).
    pub fn trainable_names(&self) -> Vec<String> {
        self.tensor_names()
            .into_iter()
            .filter(|n| !n.contains(".z0_"))
            .collect()
    }

    fn latent_field<'a>(codes: &'a LatentCodes, name: &str) -> Option<&'a ndarray::Array1<f64>> {
        Some(match name {
            "z_sh" => &codes.z_sh,
            "z_ex" => &codes.z_ex,
            "z_te" => &codes.z_te,
            "z_il" => &codes.z_il,
            "z0_sh" => &codes.z0_sh,
            "z0_ex" => &codes.z0_ex,
            "z0_te" => &codes.z0_te,
            "z0_il" => &codes.z0_il,
            _ => return None,
        })
    }

    /// Clones one tensor by name.
    pub fn tensor(&self, name: &str) -> Option<ArrayD<f64>> {
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            [field @ ("field_eyes" | "field_face"), layer, kind] => {
                let f = if *field == "field_eyes" { &self.field_eyes } else { &self.field_face };
                let dense = match *layer {
                    "sigma_head" => &f.sigma_head,
                    "feature_head" => &f.feature_head,
                    l => {
                        let idx: usize = l.strip_prefix("layer")?.parse().ok()?;
                        f.layers.get(idx)?
                    }
                };
                match *kind {
                    "weight" => Some(dense.weight.clone().into_dyn()),
                    "bias" => Some(dense.bias.clone().into_dyn()),
                    _ => None,
                }
            }
            ["decoder", layer, kind] => {
                let dense = match *layer {
                    "head" => &self.decoder.head,
                    l => {
                        let idx: usize = l.strip_prefix("stage")?.parse().ok()?;
                        self.decoder.stages.get(idx)?
                    }
                };
                match *kind {
                    "weight" => Some(dense.weight.clone().into_dyn()),
                    "bias" => Some(dense.bias.clone().into_dyn()),
                    _ => None,
                }
            }
            ["latent", sid, code] => {
                let sid: u32 = sid.parse().ok()?;
                Self::latent_field(self.latents.get(&sid)?, code).map(|z| z.clone().into_dyn())
            }
            _ => None,
        }
    }

    /// Writes one tensor by name; the shape must match.
    pub fn set_tensor(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        let current = self
            .tensor(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown tensor {name}")))?;
        if current.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {name}: {:?} vs {:?}",
                current.shape(),
                value.shape()
            )));
        }
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            [field @ ("field_eyes" | "field_face"), layer, kind] => {
                let f = if *field == "field_eyes" {
                    &mut self.field_eyes
                } else {
                    &mut self.field_face
                };
                let dense = match *layer {
                    "sigma_head" => &mut f.sigma_head,
                    "feature_head" => &mut f.feature_head,
                    l => {
                        let idx: usize = l.strip_prefix("layer").unwrap().parse().unwrap();
                        &mut f.layers[idx]
                    }
                };
                if *kind == "weight" {
                    dense.weight = value.into_dimensionality().expect("2d");
                } else {
                    dense.bias = value.into_dimensionality().expect("1d");
                }
            }
            ["decoder", layer, kind] => {
                let dense = match *layer {
                    "head" => &mut self.decoder.head,
                    l => {
                        let idx: usize = l.strip_prefix("stage").unwrap().parse().unwrap();
                        &mut self.decoder.stages[idx]
                    }
                };
                if *kind == "weight" {
                    dense.weight = value.into_dimensionality().expect("2d");
                } else {
                    dense.bias = value.into_dimensionality().expect("1d");
                }
            }
            ["latent", sid, code] => {
                let sid: u32 = sid.parse().unwrap();
                let codes = self.latents.get_mut(&sid).unwrap();
                let v = value.into_dimensionality().expect("1d");
                match *code {
                    "z_sh" => codes.z_sh = v,
                    "z_ex" => codes.z_ex = v,
                    "z_te" => codes.z_te = v,
                    "z_il" => codes.z_il = v,
                    "z0_sh" => codes.z0_sh = v,
                    "z0_ex" => codes.z0_ex = v,
                    "z0_te" => codes.z0_te = v,
                    "z0_il" => codes.z0_il = v,
                    _ => unreachable!("validated by tensor()"),
                }
            }
            _ => unreachable!("validated by tensor()"),
        }
        Ok(())
    }

    /// Stable digest over all tensors; freeze contracts compare this before
    /// and after operations that must not touch the weights.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for name in self.tensor_names() {
            name.hash(&mut h);
            for v in self.tensor(&name).expect("own name").iter() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Registers both fields and the decoder. `trainable` picks gradient
    /// leaves vs frozen constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        ModelVars {
            eyes: self.field_eyes.register(tape, trainable && self.two_stream),
            face: self.field_face.register(tape, trainable),
            decoder: self.decoder.register(tape, trainable),
        }
    }

    /// Effective eye-feature rotation for a gaze label.
    pub fn eye_rotation(&self, gaze: GazeAngles) -> RotationMatrix {
        if self.rotation {
            gaze_rotation_matrix(gaze)
        } else {
            RotationMatrix::identity()
        }
    }

    /// Full forward pass on the tape. Two-stream runs produce the triplet;
    /// vanilla runs render the single stream and leave the side images out.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        latvars: &LatentVars,
        gaze: GazeAngles,
        pose: &CameraPose,
        intrinsics: &CameraIntrinsics,
        sample_seed: u64,
    ) -> Result<ForwardImages> {
        let cfg = &self.render_config;
        let rays = generate_rays(pose, intrinsics, cfg.low_res, cfg.low_res, cfg.near, cfg.far)?;
        let gaze_var = tape.constant(
            ndarray::Array1::from_vec(vec![gaze.pitch, gaze.yaw]).into_dyn(),
        );
        if self.two_stream {
            let out = render_triplet_on_tape(
                tape,
                &vars.eyes,
                &vars.face,
                latvars,
                gaze_var,
                &self.eye_rotation(gaze),
                &rays,
                cfg,
                sample_seed,
                &vars.decoder,
            )?;
            Ok(ForwardImages {
                img_whole: out.img_whole,
                img_face: Some(out.img_face),
                img_eyes: Some(out.img_eyes),
            })
        } else {
            let (points, deltas) = sample_along_rays(&rays, cfg.n_samples, cfg.stratified, sample_seed)?;
            let (n, s) = (points.dim().0, points.dim().1);
            let flat = points
                .into_shape(IxDyn(&[n * s, 3]))
                .expect("points reshape")
                .into_dimensionality()
                .expect("2d");
            let enc = self.field_config.encoding().encode_batch(&flat)?;
            let x_enc = tape.constant(enc.into_dyn());
            let cond = conditioning(tape, latvars, gaze_var, n * s);
            let (sigma, feat) = field_forward_on_tape(tape, &vars.face, x_enc, cond)?;
            let l_f = tape.value(feat).shape()[1];
            let sigma = tape.reshape(sigma, &[n, s]);
            let feat = tape.reshape(feat, &[n, s, l_f]);
            let grid = volume_render_on_tape(tape, sigma, feat, &deltas)?;
            let g = tape.reshape(grid, &[rays.h, rays.w, l_f + 1]);
            let img = neural_render_on_tape(tape, &vars.decoder, g)?;
            Ok(ForwardImages {
                img_whole: img,
                img_face: None,
                img_eyes: None,
            })
        }
    }

    /// Plain-array render with frozen weights. Vanilla models return the
    /// single stream for all three images.
    pub fn render(
        &self,
        codes: &LatentCodes,
        gaze: GazeAngles,
        pose: &CameraPose,
        intrinsics: &CameraIntrinsics,
        sample_seed: u64,
    ) -> Result<RenderedTriplet> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let latvars = codes.register(&mut tape, false);
        let out = self.forward_on_tape(&mut tape, &vars, &latvars, gaze, pose, intrinsics, sample_seed)?;
        let grab = |tape: &Tape, v: Var| -> ImageGrid {
            tape.value(v).clone().into_dimensionality().expect("3d image")
        };
        let whole = grab(&tape, out.img_whole);
        Ok(RenderedTriplet {
            face: out.img_face.map(|v| grab(&tape, v)).unwrap_or_else(|| whole.clone()),
            eyes: out.img_eyes.map(|v| grab(&tape, v)).unwrap_or_else(|| whole.clone()),
            whole,
        })
    }
}

//! Ray generation, stratified sampling, feature volume rendering, eye
//! feature rotation, max merging, and the shared upsampling decoder.
//!
//! The pipeline renders each stream to a low-resolution feature grid with
//! `L_f + 1` channels (features plus accumulated alpha), rigidly rotates the
//! eye grid's channel triplets by the gaze rotation matrix, merges the two
//! grids with an element-wise maximum, and decodes all three grids to RGB
//! with one shared set of decoder weights.

use crate::camera::{CameraIntrinsics, CameraPose};
use crate::error::{Error, Result};
use crate::field::{conditioning, field_forward_on_tape, DenseLayer, FieldVars, LatentVars};
use crate::geometry::RotationMatrix;
use crate::pixels::ImageGrid;
use crate::tape::{Tape, Var};
use ndarray::{Array1, Array2, Array3, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

/// One ray per low-resolution pixel, world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBundle {
    /// `(h*w, 3)` origins (all equal to the camera center).
    pub origins: Array2<f64>,
    /// `(h*w, 3)` unit directions, row-major pixel order.
    pub directions: Array2<f64>,
    pub h: usize,
    pub w: usize,
    pub near: f64,
    pub far: f64,
}

/// `(h, w, L_f + 1)` rendered feature grid; the last channel is alpha.
pub type FeatureGrid = Array3<f64>;

/// Geometry of the low-resolution render and the decoder stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub low_res: usize,
    pub n_samples: usize,
    pub near: f64,
    pub far: f64,
    pub stratified: bool,
    pub upsample_stages: usize,
    pub decoder_hidden: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            low_res: 16,
            n_samples: 16,
            near: 635.0,
            far: 725.0,
            stratified: true,
            upsample_stages: 2,
            decoder_hidden: 32,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::InvalidArgument("n_samples must be >= 2".into()));
        }
        // partial_cmp so a NaN bound also fails the check
        if self.near.partial_cmp(&self.far) != Some(std::cmp::Ordering::Less) || self.near <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "bad depth range [{}, {}]",
                self.near, self.far
            )));
        }
        if self.low_res < 2 || self.upsample_stages == 0 {
            return Err(Error::InvalidArgument("degenerate render geometry".into()));
        }
        Ok(())
    }

    pub fn output_res(&self) -> usize {
        self.low_res << self.upsample_stages
    }
}

/// Casts one ray through the center of each low-resolution pixel. The full
/// intrinsics are rescaled to the `h x w` grid, so the low-res render covers
/// exactly the high-res field of view.
pub fn generate_rays(
    pose: &CameraPose,
    intrinsics: &CameraIntrinsics,
    h: usize,
    w: usize,
    near: f64,
    far: f64,
) -> Result<RayBundle> {
    if h == 0 || w == 0 || near.partial_cmp(&far) != Some(std::cmp::Ordering::Less) {
        return Err(Error::InvalidArgument("empty ray grid or bad range".into()));
    }
    let sx = w as f64 / intrinsics.width as f64;
    let sy = h as f64 / intrinsics.height as f64;
    let (fx, fy) = (intrinsics.focal_x * sx, intrinsics.focal_y * sy);
    let (cx, cy) = (intrinsics.center_x * sx, intrinsics.center_y * sy);
    let r_cw = pose.rotation.transpose();
    let origin = -r_cw.apply(&pose.translation);
    let mut origins = Array2::zeros((h * w, 3));
    let mut directions = Array2::zeros((h * w, 3));
    for i in 0..h {
        for j in 0..w {
            let d_cam = nalgebra::Vector3::new(
                (j as f64 + 0.5 - cx) / fx,
                (i as f64 + 0.5 - cy) / fy,
                1.0,
            )
            .normalize();
            let d = r_cw.apply(&d_cam);
            let r = i * w + j;
            for c in 0..3 {
                origins[[r, c]] = origin[c];
                directions[[r, c]] = d[c];
            }
        }
    }
    Ok(RayBundle {
        origins,
        directions,
        h,
        w,
        near,
        far,
    })
}

/// Depth samples along every ray: `n` bins partitioning `[near, far]`,
/// midpoints when `stratified` is off, per-bin uniform jitter otherwise
/// (seed-deterministic). Returns `(points (N, S, 3), deltas (N, S))`; the
/// last delta is capped at the bin width.
pub fn sample_along_rays(
    rays: &RayBundle,
    n_samples: usize,
    stratified: bool,
    seed: u64,
) -> Result<(Array3<f64>, Array2<f64>)> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument("n_samples must be >= 2".into()));
    }
    let n = rays.origins.nrows();
    let bin = (rays.far - rays.near) / n_samples as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Array3::zeros((n, n_samples, 3));
    let mut deltas = Array2::zeros((n, n_samples));
    let mut depths = vec![0.0f64; n_samples];
    for r in 0..n {
        for (s, d) in depths.iter_mut().enumerate() {
            let u = if stratified { rng.gen::<f64>() } else { 0.5 };
            *d = rays.near + (s as f64 + u) * bin;
        }
        for s in 0..n_samples {
            deltas[[r, s]] = if s + 1 < n_samples {
                depths[s + 1] - depths[s]
            } else {
                bin
            };
            for c in 0..3 {
                points[[r, s, c]] = rays.origins[[r, c]] + depths[s] * rays.directions[[r, c]];
            }
        }
    }
    Ok((points, deltas))
}

/// Emission-absorption quadrature on the tape.
///
/// `sigma` is `(N, S)`, `features` is `(N, S, L)`, `deltas` a constant
/// `(N, S)`. Returns the flat `(N, L + 1)` grid: weighted feature sums with
/// the accumulated alpha appended, composited over black.
pub fn volume_render_on_tape(
    tape: &mut Tape,
    sigma: Var,
    features: Var,
    deltas: &Array2<f64>,
) -> Result<Var> {
    let s_shape = tape.value(sigma).shape().to_vec();
    let f_shape = tape.value(features).shape().to_vec();
    if s_shape.len() != 2 || f_shape.len() != 3 || s_shape != f_shape[..2] {
        return Err(Error::ShapeMismatch(format!(
            "sigma {s_shape:?} vs features {f_shape:?}"
        )));
    }
    if s_shape != deltas.shape() {
        return Err(Error::ShapeMismatch("deltas shape".into()));
    }
    let d = tape.constant(deltas.clone().into_dyn());
    let sd = tape.mul(sigma, d);
    // T_i = exp(-sum_{j<i} sigma_j delta_j)
    let acc = tape.cumsum_exclusive(sd, 1);
    let neg_acc = tape.neg(acc);
    let transmittance = tape.exp(neg_acc);
    // alpha_i = 1 - exp(-sigma_i delta_i)
    let neg_sd = tape.neg(sd);
    let exp_neg = tape.exp(neg_sd);
    let neg_exp = tape.neg(exp_neg);
    let alpha = tape.offset(neg_exp, 1.0);
    let weights = tape.mul(transmittance, alpha);
    let feat = tape.weighted_sum(weights, features);
    let alpha_total = tape.sum_axis(weights, 1);
    let alpha_col = tape.reshape(alpha_total, &[s_shape[0], 1]);
    Ok(tape.concat(&[feat, alpha_col], 1))
}

/// Plain-array volume rendering; rejects negative densities.
pub fn volume_render(
    sigma: &Array2<f64>,
    features: &Array3<f64>,
    deltas: &Array2<f64>,
) -> Result<Array2<f64>> {
    if sigma.iter().any(|s| *s < 0.0) {
        return Err(Error::InvalidArgument("negative density".into()));
    }
    let mut tape = Tape::new();
    let s = tape.constant(sigma.clone().into_dyn());
    let f = tape.constant(features.clone().into_dyn());
    let out = volume_render_on_tape(&mut tape, s, f, deltas)?;
    Ok(tape.value(out).clone().into_dimensionality().expect("2d"))
}

/// Rotates each contiguous channel triplet of the feature channels by `R`;
/// the trailing alpha channel passes through unchanged.
pub fn rotate_eye_features(grid: &FeatureGrid, r: &RotationMatrix) -> Result<FeatureGrid> {
    let (h, w, c) = grid.dim();
    if c < 4 || (c - 1) % 3 != 0 {
        return Err(Error::InvalidArgument(format!(
            "feature channels {} not a multiple of 3",
            c.saturating_sub(1)
        )));
    }
    let m = r.matrix();
    let mut out = grid.clone();
    for i in 0..h {
        for j in 0..w {
            for t in 0..(c - 1) / 3 {
                let v = nalgebra::Vector3::new(
                    grid[[i, j, 3 * t]],
                    grid[[i, j, 3 * t + 1]],
                    grid[[i, j, 3 * t + 2]],
                );
                let rv = m * v;
                for k in 0..3 {
                    out[[i, j, 3 * t + k]] = rv[k];
                }
            }
        }
    }
    Ok(out)
}

/// Element-wise maximum over all channels including alpha.
pub fn merge_features(a: &FeatureGrid, b: &FeatureGrid) -> Result<FeatureGrid> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "merge {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let mut out = a.clone();
    out.zip_mut_with(b, |x, &y| {
        if y > *x {
            *x = y;
        }
    });
    Ok(out)
}

/// Weights of the shared upsampling decoder: per stage a 1x1 channel mix
/// after nearest 2x upsampling, then a 1x1 RGB head through a sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParameters {
    pub in_channels: usize,
    pub hidden: usize,
    pub stages: Vec<DenseLayer>,
    pub head: DenseLayer,
}

impl DecoderParameters {
    pub fn init(in_channels: usize, hidden: usize, n_stages: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(n_stages);
        let mut c = in_channels;
        for _ in 0..n_stages {
            stages.push(dense_init(&mut rng, c, hidden));
            c = hidden;
        }
        Self {
            in_channels,
            hidden,
            stages,
            head: dense_init(&mut rng, c, 3),
        }
    }

    pub fn zeroed(in_channels: usize, hidden: usize, n_stages: usize) -> Self {
        let mut stages = Vec::with_capacity(n_stages);
        let mut c = in_channels;
        for _ in 0..n_stages {
            stages.push(DenseLayer {
                weight: Array2::zeros((c, hidden)),
                bias: Array1::zeros(hidden),
            });
            c = hidden;
        }
        Self {
            in_channels,
            hidden,
            stages,
            head: DenseLayer {
                weight: Array2::zeros((c, 3)),
                bias: Array1::zeros(3),
            },
        }
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> DecoderVars {
        let mut reg = |a: ndarray::ArrayD<f64>| {
            if trainable {
                tape.leaf(a)
            } else {
                tape.constant(a)
            }
        };
        DecoderVars {
            stages: self
                .stages
                .iter()
                .map(|l| (reg(l.weight.clone().into_dyn()), reg(l.bias.clone().into_dyn())))
                .collect(),
            head: (
                reg(self.head.weight.clone().into_dyn()),
                reg(self.head.bias.clone().into_dyn()),
            ),
        }
    }
}

fn dense_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> DenseLayer {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    DenseLayer {
        weight: Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng)),
        bias: Array1::zeros(fan_out),
    }
}

/// Tape handles of the registered decoder weights.
#[derive(Debug, Clone)]
pub struct DecoderVars {
    pub stages: Vec<(Var, Var)>,
    pub head: (Var, Var),
}

/// Decodes a `(h, w, C)` feature grid variable to a `(2^stages h, ..., 3)`
/// image variable in `[0, 1]`.
pub fn neural_render_on_tape(tape: &mut Tape, vars: &DecoderVars, grid: Var) -> Result<Var> {
    let shape = tape.value(grid).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!("feature grid {shape:?}")));
    }
    let mut x = grid;
    for &(w, b) in &vars.stages {
        let up = tape.upsample_nearest_2x(x);
        let s = tape.value(up).shape().to_vec();
        let flat = tape.reshape(up, &[s[0] * s[1], s[2]]);
        let mixed = tape.matmul(flat, w);
        let mixed = tape.add_bias(mixed, b);
        let act = tape.leaky_relu(mixed, 0.01);
        let c_out = tape.value(act).shape()[1];
        x = tape.reshape(act, &[s[0], s[1], c_out]);
    }
    let s = tape.value(x).shape().to_vec();
    let flat = tape.reshape(x, &[s[0] * s[1], s[2]]);
    let rgb = tape.matmul(flat, vars.head.0);
    let rgb = tape.add_bias(rgb, vars.head.1);
    let rgb = tape.sigmoid(rgb);
    Ok(tape.reshape(rgb, &[s[0], s[1], 3]))
}

/// Plain-array decode.
pub fn neural_render(grid: &FeatureGrid, params: &DecoderParameters) -> Result<ImageGrid> {
    if grid.dim().2 != params.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "grid channels {} vs decoder {}",
            grid.dim().2,
            params.in_channels
        )));
    }
    let mut tape = Tape::new();
    let g = tape.constant(grid.clone().into_dyn());
    let vars = params.register(&mut tape, false);
    let img = neural_render_on_tape(&mut tape, &vars, g)?;
    Ok(tape.value(img).clone().into_dimensionality().expect("3d"))
}

/// Everything one full forward pass produces, as tape variables.
pub struct RenderOutput {
    /// `(N, L_f + 1)` flat grids in low-res pixel order.
    pub grid_face: Var,
    pub grid_eyes: Var,
    pub grid_eyes_rot: Var,
    pub grid_merged: Var,
    /// `(H, W, 3)` decoded images.
    pub img_face: Var,
    pub img_eyes: Var,
    pub img_whole: Var,
}

/// Runs the full two-stream pipeline on the tape: both fields forward at the
/// ray sample points, volume rendering, triplet rotation of the eye grid by
/// `rotation` (pass identity to ablate), max merging, and three decodes with
/// the same decoder weights.
#[allow(clippy::too_many_arguments)]
pub fn render_triplet_on_tape(
    tape: &mut Tape,
    eyes: &FieldVars,
    face: &FieldVars,
    latents: &LatentVars,
    gaze: Var,
    rotation: &RotationMatrix,
    rays: &RayBundle,
    cfg: &RenderConfig,
    sample_seed: u64,
    decoder: &DecoderVars,
) -> Result<RenderOutput> {
    cfg.validate()?;
    let (points, deltas) = sample_along_rays(rays, cfg.n_samples, cfg.stratified, sample_seed)?;
    let (n, s) = (points.dim().0, points.dim().1);
    let flat = points
        .clone()
        .into_shape(IxDyn(&[n * s, 3]))
        .expect("points reshape")
        .into_dimensionality()
        .expect("2d");
    let enc = face.config.encoding().encode_batch(&flat)?;
    let x_enc = tape.constant(enc.into_dyn());
    let cond = conditioning(tape, latents, gaze, n * s);

    let run_stream = |tape: &mut Tape, vars: &FieldVars| -> Result<(Var, Var)> {
        let (sigma, feat) = field_forward_on_tape(tape, vars, x_enc, cond)?;
        let l_f = tape.value(feat).shape()[1];
        let sigma = tape.reshape(sigma, &[n, s]);
        let feat = tape.reshape(feat, &[n, s, l_f]);
        Ok((sigma, feat))
    };
    let (sig_f, feat_f) = run_stream(tape, face)?;
    let (sig_e, feat_e) = run_stream(tape, eyes)?;
    let grid_face = volume_render_on_tape(tape, sig_f, feat_f, &deltas)?;
    let grid_eyes = volume_render_on_tape(tape, sig_e, feat_e, &deltas)?;

    let l_f1 = tape.value(grid_eyes).shape()[1];
    let feat_part = tape.slice(grid_eyes, 1, 0, l_f1 - 1);
    let alpha_part = tape.slice(grid_eyes, 1, l_f1 - 1, l_f1);
    let m = rotation.matrix();
    let r_flat = tape.constant(
        Array1::from_vec(vec![
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ])
        .into_dyn(),
    );
    let rotated = tape.rotate_triplets(feat_part, r_flat);
    let grid_eyes_rot = tape.concat(&[rotated, alpha_part], 1);
    let grid_merged = tape.max(grid_face, grid_eyes_rot);

    let decode = |tape: &mut Tape, grid: Var| -> Result<Var> {
        let g = tape.reshape(grid, &[rays.h, rays.w, l_f1]);
        neural_render_on_tape(tape, decoder, g)
    };
    let img_face = decode(tape, grid_face)?;
    let img_eyes = decode(tape, grid_eyes_rot)?;
    let img_whole = decode(tape, grid_merged)?;
    Ok(RenderOutput {
        grid_face,
        grid_eyes,
        grid_eyes_rot,
        grid_merged,
        img_face,
        img_eyes,
        img_whole,
    })
}

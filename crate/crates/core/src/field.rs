//! Positional encoding and the two conditional MLP radiance fields.
//!
//! Each stream (eyes, face-without-eyes) maps an encoded 3D position plus a
//! conditioning vector — the four latent codes and the raw pitch–yaw gaze —
//! to a non-negative density and an `L_f`-dimensional feature. Both streams
//! share the input signature and output dimensionality; they differ only in
//! their weights.

use crate::error::{Error, Result};
use crate::geometry::GazeAngles;
use crate::synth::SyntheticSubject;
use crate::tape::{Tape, Var};
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const Z_SH_DIM: usize = 16;
pub const Z_EX_DIM: usize = 8;
pub const Z_TE_DIM: usize = 16;
pub const Z_IL_DIM: usize = 4;
/// Total conditioning width: the four codes plus the raw 2-dim gaze.
pub const COND_DIM: usize = Z_SH_DIM + Z_EX_DIM + Z_TE_DIM + Z_IL_DIM + 2;

/// Which radiance field a call addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldStream {
    Eyes,
    FaceWithoutEyes,
}

/// The four conditioning codes with their frozen initial values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCodes {
    pub z_sh: Array1<f64>,
    pub z_ex: Array1<f64>,
    pub z_te: Array1<f64>,
    pub z_il: Array1<f64>,
    pub z0_sh: Array1<f64>,
    pub z0_ex: Array1<f64>,
    pub z0_te: Array1<f64>,
    pub z0_il: Array1<f64>,
}

impl LatentCodes {
    pub fn zeros() -> Self {
        Self {
            z_sh: Array1::zeros(Z_SH_DIM),
            z_ex: Array1::zeros(Z_EX_DIM),
            z_te: Array1::zeros(Z_TE_DIM),
            z_il: Array1::zeros(Z_IL_DIM),
            z0_sh: Array1::zeros(Z_SH_DIM),
            z0_ex: Array1::zeros(Z_EX_DIM),
            z0_te: Array1::zeros(Z_TE_DIM),
            z0_il: Array1::zeros(Z_IL_DIM),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            (self.z_sh.len(), Z_SH_DIM),
            (self.z_ex.len(), Z_EX_DIM),
            (self.z_te.len(), Z_TE_DIM),
            (self.z_il.len(), Z_IL_DIM),
        ];
        if dims.iter().any(|(got, want)| got != want) {
            return Err(Error::ShapeMismatch("latent code dimensions".into()));
        }
        let all = [
            &self.z_sh, &self.z_ex, &self.z_te, &self.z_il, &self.z0_sh, &self.z0_ex, &self.z0_te,
            &self.z0_il,
        ];
        if all.iter().any(|z| z.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("non-finite latent code".into()));
        }
        Ok(())
    }
}

/// `sin`/`cos` frequency encoding of 3D points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionalEncoding {
    pub n_frequencies: usize,
    pub include_input: bool,
}

impl PositionalEncoding {
    pub fn encoded_dim(&self) -> usize {
        3 * (2 * self.n_frequencies + usize::from(self.include_input))
    }

    /// `gamma(x)`: optionally `x` itself, then `sin(2^k pi x), cos(2^k pi x)`
    /// per frequency `k`, each applied coordinate-wise.
    pub fn encode(&self, x: &[f64; 3]) -> Result<Vec<f64>> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite point {x:?}")));
        }
        let mut out = Vec::with_capacity(self.encoded_dim());
        if self.include_input {
            out.extend_from_slice(x);
        }
        for k in 0..self.n_frequencies {
            let f = (1u64 << k) as f64 * std::f64::consts::PI;
            for &c in x {
                out.push((f * c).sin());
            }
            for &c in x {
                out.push((f * c).cos());
            }
        }
        Ok(out)
    }

    pub fn encode_batch(&self, xs: &Array2<f64>) -> Result<Array2<f64>> {
        if xs.ncols() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "points must be (N,3), got (N,{})",
                xs.ncols()
            )));
        }
        let mut out = Array2::zeros((xs.nrows(), self.encoded_dim()));
        for (i, row) in xs.rows().into_iter().enumerate() {
            let enc = self.encode(&[row[0], row[1], row[2]])?;
            for (j, v) in enc.into_iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        Ok(out)
    }
}

/// Positional encoding of a single point with the module's toy defaults
/// (L = 6, raw input included).
pub fn encode_position(x: &[f64; 3]) -> Result<Vec<f64>> {
    PositionalEncoding {
        n_frequencies: 6,
        include_input: true,
    }
    .encode(x)
}

/// Hyperparameters shared by both streams.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub n_frequencies: usize,
    pub include_input: bool,
    pub depth: usize,
    pub width: usize,
    /// Layer index whose input re-concatenates the raw network input.
    pub skip_at: usize,
    /// Feature dimension `L_f`; must be divisible by 3 for the rotation
    /// reshape.
    pub feature_dim: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            n_frequencies: 6,
            include_input: true,
            depth: 6,
            width: 128,
            skip_at: 3,
            feature_dim: 24,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || !self.feature_dim.is_multiple_of(3) {
            return Err(Error::InvalidArgument(format!(
                "feature_dim {} must be a positive multiple of 3",
                self.feature_dim
            )));
        }
        if self.depth < 2 || self.skip_at == 0 || self.skip_at >= self.depth {
            return Err(Error::InvalidArgument(format!(
                "bad depth {} / skip_at {}",
                self.depth, self.skip_at
            )));
        }
        Ok(())
    }

    pub fn encoding(&self) -> PositionalEncoding {
        PositionalEncoding {
            n_frequencies: self.n_frequencies,
            include_input: self.include_input,
        }
    }

    /// Width of the full MLP input: encoded position plus conditioning.
    pub fn input_dim(&self) -> usize {
        self.encoding().encoded_dim() + COND_DIM
    }
}

/// One affine layer, stored `(in, out)` so activations right-multiply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let scale = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, scale).expect("finite std");
        Self {
            weight: Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }
}

/// Weights of one radiance-field MLP: trunk layers plus the density and
/// feature heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldParameters {
    pub config: FieldConfig,
    pub layers: Vec<DenseLayer>,
    pub sigma_head: DenseLayer,
    pub feature_head: DenseLayer,
}

impl FieldParameters {
    pub fn init(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_in = config.input_dim();
        let w = config.width;
        let mut layers = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let fan_in = if i == 0 {
                d_in
            } else if i == config.skip_at {
                w + d_in
            } else {
                w
            };
            layers.push(DenseLayer::init(&mut rng, fan_in, w));
        }
        Ok(Self {
            config,
            layers,
            sigma_head: DenseLayer::init(&mut rng, w, 1),
            feature_head: DenseLayer::init(&mut rng, w, config.feature_dim),
        })
    }

    /// All-zero weights; used by degenerate-case tests.
    pub fn zeroed(config: FieldConfig) -> Result<Self> {
        config.validate()?;
        let d_in = config.input_dim();
        let w = config.width;
        let layers = (0..config.depth)
            .map(|i| {
                let fan_in = if i == 0 {
                    d_in
                } else if i == config.skip_at {
                    w + d_in
                } else {
                    w
                };
                DenseLayer::zeros(fan_in, w)
            })
            .collect();
        Ok(Self {
            config,
            layers,
            sigma_head: DenseLayer::zeros(w, 1),
            feature_head: DenseLayer::zeros(w, config.feature_dim),
        })
    }

    /// Registers every weight tensor on the tape. `trainable` picks leaves
    /// (gradients tracked) vs constants (frozen).
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> FieldVars {
        let mut reg = |a: ArrayD<f64>| {
            if trainable {
                tape.leaf(a)
            } else {
                tape.constant(a)
            }
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            layers.push((reg(l.weight.clone().into_dyn()), reg(l.bias.clone().into_dyn())));
        }
        let sigma_head = (
            reg(self.sigma_head.weight.clone().into_dyn()),
            reg(self.sigma_head.bias.clone().into_dyn()),
        );
        let feature_head = (
            reg(self.feature_head.weight.clone().into_dyn()),
            reg(self.feature_head.bias.clone().into_dyn()),
        );
        FieldVars {
            config: self.config,
            layers,
            sigma_head,
            feature_head,
        }
    }
}

/// Tape handles of one stream's registered weights.
#[derive(Debug, Clone)]
pub struct FieldVars {
    pub config: FieldConfig,
    pub layers: Vec<(Var, Var)>,
    pub sigma_head: (Var, Var),
    pub feature_head: (Var, Var),
}

/// Tape handles of one subject's trainable codes, each a 1-d vector.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub z_sh: Var,
    pub z_ex: Var,
    pub z_te: Var,
    pub z_il: Var,
}

impl LatentCodes {
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> LatentVars {
        let mut reg = |z: &Array1<f64>| {
            let a = z.clone().into_dyn();
            if trainable {
                tape.leaf(a)
            } else {
                tape.constant(a)
            }
        };
        LatentVars {
            z_sh: reg(&self.z_sh),
            z_ex: reg(&self.z_ex),
            z_te: reg(&self.z_te),
            z_il: reg(&self.z_il),
        }
    }
}

/// Builds the `(n, COND_DIM)` conditioning block from latent handles and a
/// 1-d gaze handle `(pitch, yaw)`.
pub fn conditioning(tape: &mut Tape, latents: &LatentVars, gaze: Var, n: usize) -> Var {
    let row = tape.concat(
        &[latents.z_sh, latents.z_ex, latents.z_te, latents.z_il, gaze],
        0,
    );
    tape.broadcast_rows(row, n)
}

/// Runs one stream's MLP on the tape.
///
/// `x_enc` is the `(N, L_x)` encoded-position block (a constant — positions
/// come from camera rays and are never differentiated); `cond` is the
/// `(N, COND_DIM)` conditioning block. Returns `(sigma, features)` shaped
/// `(N, 1)` and `(N, L_f)`; sigma passes through softplus so it is
/// non-negative for any weights.
pub fn field_forward_on_tape(
    tape: &mut Tape,
    vars: &FieldVars,
    x_enc: Var,
    cond: Var,
) -> Result<(Var, Var)> {
    let n = tape.value(x_enc).shape()[0];
    let (lx, cd) = (tape.value(x_enc).shape()[1], tape.value(cond).shape()[1]);
    if tape.value(cond).shape()[0] != n {
        return Err(Error::ShapeMismatch(format!(
            "position rows {n} vs conditioning rows {}",
            tape.value(cond).shape()[0]
        )));
    }
    if lx + cd != vars.config.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "input width {} + {} != configured {}",
            lx,
            cd,
            vars.config.input_dim()
        )));
    }
    let input = tape.concat(&[x_enc, cond], 1);
    let mut h = input;
    for (i, &(w, b)) in vars.layers.iter().enumerate() {
        if i == vars.config.skip_at {
            h = tape.concat(&[h, input], 1);
        }
        let z = tape.matmul(h, w);
        let z = tape.add_bias(z, b);
        h = tape.relu(z);
    }
    let s = tape.matmul(h, vars.sigma_head.0);
    let s = tape.add_bias(s, vars.sigma_head.1);
    let sigma = tape.softplus(s);
    let f = tape.matmul(h, vars.feature_head.0);
    let features = tape.add_bias(f, vars.feature_head.1);
    Ok((sigma, features))
}

/// Convenience evaluation without an external tape: encodes the batch,
/// builds the conditioning from `latents` and `g`, and returns plain
/// `(sigma, features)` arrays.
pub fn field_forward(
    stream: FieldStream,
    x_batch: &Array2<f64>,
    latents: &LatentCodes,
    g: GazeAngles,
    params_eyes: &FieldParameters,
    params_face: &FieldParameters,
) -> Result<(Array1<f64>, Array2<f64>)> {
    latents.validate()?;
    let params = match stream {
        FieldStream::Eyes => params_eyes,
        FieldStream::FaceWithoutEyes => params_face,
    };
    let mut tape = Tape::new();
    let enc = params.config.encoding().encode_batch(x_batch)?;
    let n = enc.nrows();
    let x_enc = tape.constant(enc.into_dyn());
    let lv = latents.register(&mut tape, false);
    let gaze = tape.constant(Array1::from_vec(vec![g.pitch, g.yaw]).into_dyn());
    let cond = conditioning(&mut tape, &lv, gaze, n);
    let vars = params.register(&mut tape, false);
    let (sigma, features) = field_forward_on_tape(&mut tape, &vars, x_enc, cond)?;
    let s = tape
        .value(sigma)
        .clone()
        .into_shape(IxDyn(&[n]))
        .expect("sigma column")
        .into_dimensionality()
        .expect("1d");
    let f = tape
        .value(features)
        .clone()
        .into_dimensionality()
        .expect("2d");
    Ok((s, f))
}

/// Embeds the generator's ground-truth subject parameters into the latent
/// slots, plus gaussian noise of `noise_scale`. The placement is a fixed
/// documented linear map:
///
/// * `z_sh`: head radius / 30, eye radius / 10, the six eye-offset
///   coordinates / 30; rest zero.
/// * `z_ex`: expression bulge in slot 0; rest zero.
/// * `z_te`: skin, iris, sclera albedos in slots 0–8; rest zero.
/// * `z_il`: illumination direction in slots 0–2; rest zero.
///
/// `z0` is always the noiseless embedding.
pub fn init_latents_from_subject(
    subject: &SyntheticSubject,
    noise_scale: f64,
    seed: u64,
) -> LatentCodes {
    let mut z0_sh = Array1::zeros(Z_SH_DIM);
    z0_sh[0] = subject.head_radius / 30.0;
    z0_sh[1] = subject.eye_radius / 10.0;
    for e in 0..2 {
        for c in 0..3 {
            z0_sh[2 + 3 * e + c] = subject.eye_offsets[e][c] / 30.0;
        }
    }
    let mut z0_ex = Array1::zeros(Z_EX_DIM);
    z0_ex[0] = subject.expression_bulge;
    let mut z0_te = Array1::zeros(Z_TE_DIM);
    for (k, v) in subject
        .skin_albedo
        .iter()
        .chain(&subject.iris_albedo)
        .chain(&subject.sclera_albedo)
        .enumerate()
    {
        z0_te[k] = *v;
    }
    let mut z0_il = Array1::zeros(Z_IL_DIM);
    for c in 0..3 {
        z0_il[c] = subject.illumination_dir[c];
    }

    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (subject.subject_id as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    let mut noisy = |z0: &Array1<f64>| {
        if noise_scale == 0.0 {
            return z0.clone();
        }
        let dist = Normal::new(0.0, noise_scale).expect("finite scale");
        z0.mapv(|v| v + dist.sample(&mut rng))
    };
    LatentCodes {
        z_sh: noisy(&z0_sh),
        z_ex: noisy(&z0_ex),
        z_te: noisy(&z0_te),
        z_il: noisy(&z0_il),
        z0_sh,
        z0_ex,
        z0_te,
        z0_il,
    }
}

/// Sum of squared differences between two parameter sets; used by freeze
/// contracts in tests.
pub fn parameter_distance(a: &FieldParameters, b: &FieldParameters) -> f64 {
    let mut d = 0.0;
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        d += (&la.weight - &lb.weight).mapv(|v| v * v).sum();
        d += (&la.bias - &lb.bias).mapv(|v| v * v).sum();
    }
    d += (&a.sigma_head.weight - &b.sigma_head.weight).mapv(|v| v * v).sum();
    d += (&a.feature_head.weight - &b.feature_head.weight).mapv(|v| v * v).sum();
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::sample_subject;
    use approx::assert_abs_diff_eq;

    fn small_config() -> FieldConfig {
        FieldConfig {
            n_frequencies: 2,
            include_input: true,
            depth: 3,
            width: 8,
            skip_at: 1,
            feature_dim: 6,
        }
    }

    #[test]
    fn encode_zero_point_example() {
        let pe = PositionalEncoding {
            n_frequencies: 2,
            include_input: true,
        };
        let got = pe.encode(&[0.0, 0.0, 0.0]).unwrap();
        let want = [
            0.0, 0.0, 0.0, // raw
            0.0, 0.0, 0.0, 1.0, 1.0, 1.0, // k = 0
            0.0, 0.0, 0.0, 1.0, 1.0, 1.0, // k = 1
        ];
        assert_eq!(got.len(), 3 * (2 * 2 + 1));
        for (g, w) in got.iter().zip(want.iter()) {
            assert_abs_diff_eq!(g, w, epsilon = 1e-15);
        }
    }

    #[test]
    fn encoded_dimension_formula() {
        for l in 1..8 {
            for inc in [false, true] {
                let pe = PositionalEncoding {
                    n_frequencies: l,
                    include_input: inc,
                };
                assert_eq!(
                    pe.encode(&[0.3, -0.7, 0.1]).unwrap().len(),
                    pe.encoded_dim()
                );
            }
        }
    }

    #[test]
    fn encoding_injective_on_fine_grid() {
        // per-coordinate scan at 1e-3 spacing over [-1, 1]; the encoding is
        // separable per coordinate, so per-axis injectivity implies grid
        // injectivity
        let pe = PositionalEncoding {
            n_frequencies: 6,
            include_input: true,
        };
        let mut seen: Vec<Vec<u64>> = Vec::new();
        for i in 0..=2000 {
            let x = -1.0 + i as f64 * 1e-3;
            let enc = pe.encode(&[x, x, x]).unwrap();
            seen.push(enc.iter().map(|v| v.to_bits()).collect());
        }
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 2001, "duplicate encodings on the grid");
    }

    #[test]
    fn zero_weights_give_constant_softplus_density() {
        let cfg = small_config();
        let params = FieldParameters::zeroed(cfg).unwrap();
        let latents = LatentCodes::zeros();
        let xs = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - 2.0) * 0.1 + j as f64 * 0.05);
        let g = GazeAngles::new(0.1, -0.2).unwrap();
        let (sigma, feat) =
            field_forward(FieldStream::Eyes, &xs, &latents, g, &params, &params).unwrap();
        let want = (1.0f64 + 1.0f64).ln(); // softplus(0)
        for s in sigma.iter() {
            assert_abs_diff_eq!(s, &want, epsilon = 1e-12);
        }
        assert_eq!(feat.dim(), (5, 6));
        assert!(feat.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let cfg = small_config();
        let params = FieldParameters::init(cfg, 3).unwrap();
        let latents = init_latents_from_subject(&sample_subject(1, 0), 0.0, 0);
        let g = GazeAngles::new(-0.05, 0.3).unwrap();
        let xs = Array2::from_shape_fn((6, 3), |(i, j)| ((i * 3 + j) as f64).sin() * 0.4);
        let (s1, f1) =
            field_forward(FieldStream::FaceWithoutEyes, &xs, &latents, g, &params, &params)
                .unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let xs_p = Array2::from_shape_fn((6, 3), |(i, j)| xs[[perm[i], j]]);
        let (s2, f2) =
            field_forward(FieldStream::FaceWithoutEyes, &xs_p, &latents, g, &params, &params)
                .unwrap();
        for i in 0..6 {
            assert_abs_diff_eq!(s2[i], s1[perm[i]], epsilon = 1e-12);
            for c in 0..cfg.feature_dim {
                assert_abs_diff_eq!(f2[[i, c]], f1[[perm[i], c]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn streams_share_shapes() {
        let cfg = small_config();
        let pe = FieldParameters::init(cfg, 10).unwrap();
        let pf = FieldParameters::init(cfg, 11).unwrap();
        let latents = LatentCodes::zeros();
        let g = GazeAngles::new(0.0, 0.0).unwrap();
        let xs = Array2::zeros((4, 3));
        let (se, fe) = field_forward(FieldStream::Eyes, &xs, &latents, g, &pe, &pf).unwrap();
        let (sf, ff) =
            field_forward(FieldStream::FaceWithoutEyes, &xs, &latents, g, &pe, &pf).unwrap();
        assert_eq!(se.dim(), sf.dim());
        assert_eq!(fe.dim(), ff.dim());
        assert!(fe != ff, "independently seeded streams should differ");
    }

    #[test]
    fn sigma_nonnegative_for_random_weights() {
        let cfg = small_config();
        for seed in 0..5 {
            let params = FieldParameters::init(cfg, seed).unwrap();
            let latents = init_latents_from_subject(&sample_subject(7, seed as u32), 0.1, seed);
            let g = GazeAngles::new(0.2, 0.2).unwrap();
            let xs = Array2::from_shape_fn((8, 3), |(i, j)| ((i + j) as f64 * 1.7).cos());
            let (sigma, _) =
                field_forward(FieldStream::Eyes, &xs, &latents, g, &params, &params).unwrap();
            assert!(sigma.iter().all(|s| *s >= 0.0));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = FieldConfig {
            n_frequencies: 1,
            include_input: true,
            depth: 2,
            width: 4,
            skip_at: 1,
            feature_dim: 3,
        };
        let params = FieldParameters::init(cfg, 5).unwrap();
        let latents = init_latents_from_subject(&sample_subject(2, 1), 0.05, 9);
        let g = GazeAngles::new(0.15, -0.25).unwrap();
        let xs = Array2::from_shape_fn((3, 3), |(i, j)| (i as f64 * 0.2 - j as f64 * 0.1).sin());

        // loss = sum(sigma) + sum(features)
        let eval = |params: &FieldParameters, latents: &LatentCodes, g: GazeAngles| -> f64 {
            let (s, f) =
                field_forward(FieldStream::Eyes, &xs, latents, g, params, params).unwrap();
            s.sum() + f.sum()
        };

        // analytic gradients via the tape
        let mut tape = Tape::new();
        let enc = cfg.encoding().encode_batch(&xs).unwrap();
        let x_enc = tape.constant(enc.into_dyn());
        let lv = latents.register(&mut tape, true);
        let g_var = tape.leaf(Array1::from_vec(vec![g.pitch, g.yaw]).into_dyn());
        let cond = conditioning(&mut tape, &lv, g_var, 3);
        let vars = params.register(&mut tape, true);
        let (sigma, feat) = field_forward_on_tape(&mut tape, &vars, x_enc, cond).unwrap();
        let ssum = tape.sum(sigma);
        let fsum = tape.sum(feat);
        let loss = tape.add(ssum, fsum);
        let grads = tape.backward(loss);

        let h = 1e-5;
        let check = |analytic: f64, fd: f64, what: &str| {
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                (analytic - fd).abs() / denom < 1e-4,
                "{what}: analytic {analytic} vs fd {fd}"
            );
        };

        // a few weight entries of the first layer
        let gw0 = grads.get(vars.layers[0].0).unwrap();
        for &(r, c) in &[(0usize, 0usize), (3, 2), (7, 1)] {
            let mut p = params.clone();
            p.layers[0].weight[[r, c]] += h;
            let up = eval(&p, &latents, g);
            p.layers[0].weight[[r, c]] -= 2.0 * h;
            let dn = eval(&p, &latents, g);
            check(gw0[[r, c]], (up - dn) / (2.0 * h), "layer0 weight");
        }
        // a latent entry per code
        let gl = grads.get(lv.z_sh).unwrap();
        {
            let mut l = latents.clone();
            l.z_sh[2] += h;
            let up = eval(&params, &l, g);
            l.z_sh[2] -= 2.0 * h;
            let dn = eval(&params, &l, g);
            check(gl[[2]], (up - dn) / (2.0 * h), "z_sh[2]");
        }
        let gil = grads.get(lv.z_il).unwrap();
        {
            let mut l = latents.clone();
            l.z_il[1] += h;
            let up = eval(&params, &l, g);
            l.z_il[1] -= 2.0 * h;
            let dn = eval(&params, &l, g);
            check(gil[[1]], (up - dn) / (2.0 * h), "z_il[1]");
        }
        // gaze
        let gg = grads.get(g_var).unwrap();
        {
            let up = eval(&params, &latents, GazeAngles::new(g.pitch + h, g.yaw).unwrap());
            let dn = eval(&params, &latents, GazeAngles::new(g.pitch - h, g.yaw).unwrap());
            check(gg[[0]], (up - dn) / (2.0 * h), "gaze pitch");
        }
    }

    #[test]
    fn latent_init_contract() {
        let a = sample_subject(5, 0);
        let b = sample_subject(5, 1);
        let la0 = init_latents_from_subject(&a, 0.0, 7);
        assert_eq!(la0.z_sh, la0.z0_sh);
        assert_eq!(la0.z_ex, la0.z0_ex);
        let la1 = init_latents_from_subject(&a, 0.1, 7);
        let la2 = init_latents_from_subject(&a, 0.1, 7);
        assert_eq!(la1, la2);
        assert!(la1.z_sh != la1.z0_sh);
        let lb = init_latents_from_subject(&b, 0.0, 7);
        assert!((&la0.z0_sh - &lb.z0_sh).mapv(f64::abs).sum() > 0.0);
    }
}

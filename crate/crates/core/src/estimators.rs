//! Frozen auxiliary networks: the loss-time gaze estimator, the eval-time
//! gaze-and-head estimator, and the identity embedder.
//!
//! The two gaze estimators deliberately use different architectures and
//! seeds so that the network grading the model is never the network whose
//! signal the model was trained against. All three are small strided
//! convolutional networks trained on the synthetic generator's labels and
//! frozen once their validation gate is met.

use crate::error::{Error, Result};
use crate::field::DenseLayer;
use crate::geometry::{angular_error, pitchyaw_to_vector, GazeAngles};
use crate::harness::Adam;
use crate::pixels::ImageGrid;
use crate::synth::Dataset;
use crate::tape::{conv3x3_out_dims, Tape, Var};
use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use std::hash::{Hash, Hasher};

/// Which job a trained gaze estimator serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorRole {
    /// Shallower net used inside the functional loss.
    LossNet,
    /// Deeper net with an extra head-pose head, used only for evaluation.
    EvalNet,
}

/// Normalized pixel-coordinate channels appended to the input image before
/// the first convolution; localization tasks like gaze regression converge
/// far faster when the net can read positions directly.
const COORD_CHANNELS: usize = 2;

/// Convolutional backbone shared by all three networks. Kernels are stored
/// as `(9 * C_in, C_out)` matrices applied after `im2col_3x3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvNet {
    pub input_res: usize,
    pub conv: Vec<DenseLayer>,
    pub conv_in: Vec<usize>,
    pub strides: Vec<usize>,
    /// Flattened conv output -> penultimate features.
    pub dense: DenseLayer,
    /// Penultimate features -> outputs.
    pub head: DenseLayer,
}

/// Tape handles of one registered network.
pub struct ConvNetVars {
    pub conv: Vec<(Var, Var)>,
    pub dense: (Var, Var),
    pub head: (Var, Var),
}

impl ConvNet {
    fn init(
        input_res: usize,
        channels: &[usize],
        strides: &[usize],
        penultimate: usize,
        outputs: usize,
        seed: u64,
    ) -> Self {
        assert_eq!(channels.len(), strides.len() + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init_dense = |fan_in: usize, fan_out: usize| {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            DenseLayer {
                weight: Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(&mut rng)),
                bias: Array1::zeros(fan_out),
            }
        };
        let mut conv = Vec::new();
        let (mut h, mut w) = (input_res, input_res);
        for i in 0..strides.len() {
            let c_in = channels[i] + if i == 0 { COORD_CHANNELS } else { 0 };
            conv.push(init_dense(9 * c_in, channels[i + 1]));
            let (oh, ow) = conv3x3_out_dims(h, w, strides[i]);
            h = oh;
            w = ow;
        }
        let flat = h * w * channels[channels.len() - 1];
        let dense = init_dense(flat, penultimate);
        let head = init_dense(penultimate, outputs);
        Self {
            input_res,
            conv,
            conv_in: channels[..strides.len()].to_vec(),
            strides: strides.to_vec(),
            dense,
            head,
        }
    }

    pub fn penultimate_dim(&self) -> usize {
        self.dense.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.head.weight.ncols()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ConvNetVars {
        let mut reg = |a: ndarray::ArrayD<f64>| {
            if trainable {
                tape.leaf(a)
            } else {
                tape.constant(a)
            }
        };
        ConvNetVars {
            conv: self
                .conv
                .iter()
                .map(|l| (reg(l.weight.clone().into_dyn()), reg(l.bias.clone().into_dyn())))
                .collect(),
            dense: (
                reg(self.dense.weight.clone().into_dyn()),
                reg(self.dense.bias.clone().into_dyn()),
            ),
            head: (
                reg(self.head.weight.clone().into_dyn()),
                reg(self.head.bias.clone().into_dyn()),
            ),
        }
    }

    /// Forward pass on the tape for one `(H, W, 3)` image variable. Returns
    /// `(outputs (1, O), penultimate (1, P), conv activations per layer)`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ConvNetVars,
        image: Var,
    ) -> Result<(Var, Var, Vec<Var>)> {
        let shape = tape.value(image).shape().to_vec();
        if shape != [self.input_res, self.input_res, 3] {
            return Err(Error::ShapeMismatch(format!(
                "estimator input {shape:?}, want [{r}, {r}, 3]",
                r = self.input_res
            )));
        }
        let r = self.input_res;
        let coords = ndarray::Array3::from_shape_fn((r, r, COORD_CHANNELS), |(i, j, k)| {
            let t = if k == 0 { i } else { j };
            t as f64 / r as f64 - 0.5
        });
        let coords = tape.constant(coords.into_dyn());
        let mut x = tape.concat(&[image, coords], 2);
        let (mut h, mut w) = (self.input_res, self.input_res);
        let mut activations = Vec::with_capacity(self.conv.len());
        for (i, &(k, b)) in vars.conv.iter().enumerate() {
            let cols = tape.im2col_3x3(x, self.strides[i]);
            let y = tape.matmul(cols, k);
            let y = tape.add_bias(y, b);
            let y = tape.leaky_relu(y, 0.01);
            let (oh, ow) = conv3x3_out_dims(h, w, self.strides[i]);
            let c_out = tape.value(y).shape()[1];
            x = tape.reshape(y, &[oh, ow, c_out]);
            activations.push(x);
            h = oh;
            w = ow;
        }
        let c = tape.value(x).shape()[2];
        let flat = tape.reshape(x, &[1, h * w * c]);
        let pen = tape.matmul(flat, vars.dense.0);
        let pen = tape.add_bias(pen, vars.dense.1);
        let pen = tape.leaky_relu(pen, 0.01);
        let out = tape.matmul(pen, vars.head.0);
        let out = tape.add_bias(out, vars.head.1);
        Ok((out, pen, activations))
    }

    /// Plain forward: `(outputs, penultimate features)`.
    pub fn forward(&self, image: &ImageGrid) -> Result<(Array1<f64>, Array1<f64>)> {
        let mut tape = Tape::new();
        let img = tape.constant(image.clone().into_dyn());
        let vars = self.register(&mut tape, false);
        let (out, pen, _) = self.forward_on_tape(&mut tape, &vars, img)?;
        let flat = |v: Var, tape: &Tape| {
            Array1::from_iter(tape.value(v).iter().copied())
        };
        Ok((flat(out, &tape), flat(pen, &tape)))
    }

    fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.input_res.hash(&mut h);
        self.strides.hash(&mut h);
        for l in self.conv.iter().chain([&self.dense, &self.head]) {
            for v in l.weight.iter().chain(l.bias.iter()) {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// A gaze (and optionally head-pose) estimator with immutable weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenEstimator {
    pub role: EstimatorRole,
    pub net: ConvNet,
    /// Held-out gaze angular error at freeze time, degrees.
    pub validation_gaze_error_deg: f64,
    /// Held-out head-pose angular error, degrees (eval net only).
    pub validation_head_error_deg: Option<f64>,
}

impl FrozenEstimator {
    /// Untrained random-weight estimator at an arbitrary input resolution.
    /// Support machinery for gradient and fixture tests; never meets the
    /// validation gates.
    #[doc(hidden)]
    pub fn random_untrained(input_res: usize, seed: u64) -> Self {
        Self {
            role: EstimatorRole::LossNet,
            net: ConvNet::init(input_res, &[3, 6, 8], &[2, 2], 16, 2, seed),
            validation_gaze_error_deg: f64::INFINITY,
            validation_head_error_deg: None,
        }
    }

    /// Untrained random-weight estimator with a head-pose head, playing the
    /// eval-net role in fixture tests.
    #[doc(hidden)]
    pub fn random_untrained_eval(input_res: usize, seed: u64) -> Self {
        Self {
            role: EstimatorRole::EvalNet,
            net: ConvNet::init(input_res, &[3, 6, 8], &[2, 2], 16, 4, seed),
            validation_gaze_error_deg: f64::INFINITY,
            validation_head_error_deg: Some(f64::INFINITY),
        }
    }

    /// Gaze prediction from an image.
    pub fn predict_gaze(&self, image: &ImageGrid) -> Result<GazeAngles> {
        let (out, _) = self.net.forward(image)?;
        GazeAngles::new(out[0], out[1])
    }

    /// Head-pose prediction; only the eval net carries this head.
    pub fn predict_head_pose(&self, image: &ImageGrid) -> Result<GazeAngles> {
        if self.net.output_dim() < 4 {
            return Err(Error::InvalidArgument(
                "this estimator has no head-pose head".into(),
            ));
        }
        let (out, _) = self.net.forward(image)?;
        GazeAngles::new(out[2], out[3])
    }

    /// Penultimate feature vector (used by the Fréchet proxy metric).
    pub fn penultimate_features(&self, image: &ImageGrid) -> Result<Array1<f64>> {
        Ok(self.net.forward(image)?.1)
    }

    /// Stable digest of the weights; the evaluation pipeline asserts the
    /// loss-time and eval-time fingerprints differ.
    pub fn fingerprint(&self) -> u64 {
        self.net.fingerprint()
    }
}

/// Frozen subject-identity classifier. Its pre-head dense activation is the
/// identity embedding, and its conv activations serve as the perceptual
/// feature layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityEmbedder {
    pub net: ConvNet,
    pub n_subjects: usize,
    /// Held-out classification accuracy at freeze time.
    pub validation_accuracy: f64,
}

impl IdentityEmbedder {
    /// Untrained random-weight embedder; see
    /// [`FrozenEstimator::random_untrained`].
    #[doc(hidden)]
    pub fn random_untrained(input_res: usize, n_subjects: usize, seed: u64) -> Self {
        Self {
            net: ConvNet::init(input_res, &[3, 6, 8, 8], &[2, 2, 2], 16, n_subjects, seed),
            n_subjects,
            validation_accuracy: 0.0,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.net.penultimate_dim()
    }

    /// Identity embedding of an image.
    pub fn embed(&self, image: &ImageGrid) -> Result<Array1<f64>> {
        Ok(self.net.forward(image)?.1)
    }

    /// Per-layer conv activations for the perceptual loss; layer indices
    /// are 1-based to match the "i-th layer" convention.
    pub fn perceptual_layers_on_tape(
        &self,
        tape: &mut Tape,
        image: Var,
        layers: &[usize],
    ) -> Result<Vec<Var>> {
        let vars = self.net.register(tape, false);
        let (_, _, acts) = self.net.forward_on_tape(tape, &vars, image)?;
        layers
            .iter()
            .map(|&i| {
                if i == 0 || i > acts.len() {
                    Err(Error::InvalidArgument(format!(
                        "perceptual layer {i} out of range 1..={}",
                        acts.len()
                    )))
                } else {
                    Ok(acts[i - 1])
                }
            })
            .collect()
    }

    pub fn n_layers(&self) -> usize {
        self.net.conv.len()
    }

    pub fn fingerprint(&self) -> u64 {
        self.net.fingerprint()
    }
}

struct LabeledSet {
    images: Vec<ImageGrid>,
    targets: Vec<Array1<f64>>,
}

fn load_labeled(dataset: &Dataset, with_head: bool) -> Result<LabeledSet> {
    let mut images = Vec::with_capacity(dataset.len());
    let mut targets = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let s = dataset.load(i)?;
        let mut t = vec![s.gaze.pitch, s.gaze.yaw];
        if with_head {
            t.push(s.head_pose.pitch);
            t.push(s.head_pose.yaw);
        }
        images.push(s.image);
        targets.push(Array1::from_vec(t));
    }
    Ok(LabeledSet { images, targets })
}

/// Every 6th sample is held out for the validation gate.
fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for i in 0..n {
        if i % 6 == 5 {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

struct SgdBudget {
    max_steps: usize,
    batch: usize,
    check_every: usize,
    learning_rate: f64,
}

/// Runs Adam on the regression MSE until `gate(net)` returns true or the
/// budget is exhausted. Returns the number of steps taken.
fn fit_regression(
    net: &mut ConvNet,
    set: &LabeledSet,
    train_idx: &[usize],
    budget: &SgdBudget,
    seed: u64,
    gate: &mut dyn FnMut(&ConvNet) -> bool,
) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A_1234_DEAD_BEEF);
    let mut opt = Adam::new(budget.learning_rate, Some(10.0));
    let out_dim = net.output_dim();
    for step in 1..=budget.max_steps {
        // stepwise decay keeps early progress fast and the endgame stable
        let frac = step as f64 / budget.max_steps as f64;
        opt.learning_rate = budget.learning_rate
            * if frac > 0.8 {
                0.1
            } else if frac > 0.5 {
                0.3
            } else {
                1.0
            };
        let mut tape = Tape::new();
        let vars = net.register(&mut tape, true);
        let mut terms = Vec::with_capacity(budget.batch);
        for _ in 0..budget.batch {
            let i = train_idx[rng.gen_range(0..train_idx.len())];
            let img = tape.constant(set.images[i].clone().into_dyn());
            let (out, _, _) = net.forward_on_tape(&mut tape, &vars, img)?;
            let t = tape.constant(set.targets[i].clone().into_shape((1, out_dim)).expect("target").into_dyn());
            let d = tape.sub(out, t);
            let sq = tape.mul(d, d);
            terms.push(tape.sum(sq));
        }
        let total = tape.concat(&terms, 0);
        let total = tape.sum(total);
        let loss = tape.scale(total, 1.0 / (budget.batch * out_dim) as f64);
        if !tape.value(loss)[[0]].is_finite() {
            return Err(Error::Numeric(format!(
                "estimator loss diverged at step {step}"
            )));
        }
        let grads = tape.backward(loss);
        apply_step(net, &vars, &grads, &mut opt);
        if step % budget.check_every == 0 && gate(net) {
            return Ok(step);
        }
    }
    Ok(budget.max_steps)
}

fn apply_step(net: &mut ConvNet, vars: &ConvNetVars, grads: &crate::tape::Grads, opt: &mut Adam) {
    let mut handles = Vec::new();
    for (i, &(k, b)) in vars.conv.iter().enumerate() {
        handles.push((k, i * 2));
        handles.push((b, i * 2 + 1));
    }
    let base = net.conv.len() * 2;
    handles.push((vars.dense.0, base));
    handles.push((vars.dense.1, base + 1));
    handles.push((vars.head.0, base + 2));
    handles.push((vars.head.1, base + 3));
    let g: Vec<Option<ndarray::ArrayD<f64>>> = handles
        .iter()
        .map(|&(v, _)| grads.get(v).cloned())
        .collect();
    let mut arrays: Vec<ndarray::ArrayD<f64>> = Vec::new();
    for l in net.conv.iter().chain([&net.dense, &net.head]) {
        arrays.push(l.weight.clone().into_dyn());
        arrays.push(l.bias.clone().into_dyn());
    }
    {
        let mut refs: Vec<&mut ndarray::ArrayD<f64>> = arrays.iter_mut().collect();
        opt.step(&mut refs, &g);
    }
    let n = net.conv.len();
    for (i, l) in net
        .conv
        .iter_mut()
        .chain([&mut net.dense, &mut net.head])
        .enumerate()
    {
        l.weight = arrays[2 * i]
            .clone()
            .into_dimensionality()
            .expect("weight rank");
        l.bias = arrays[2 * i + 1]
            .clone()
            .into_dimensionality()
            .expect("bias rank");
    }
    debug_assert_eq!(arrays.len(), 2 * (n + 2));
}

fn mean_angular_error_deg(
    net: &ConvNet,
    set: &LabeledSet,
    idx: &[usize],
    offset: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for &i in idx {
        let (out, _) = net.forward(&set.images[i])?;
        let pred = pitchyaw_to_vector(GazeAngles::new(out[offset], out[offset + 1])?);
        let want = pitchyaw_to_vector(GazeAngles::new(
            set.targets[i][offset],
            set.targets[i][offset + 1],
        )?);
        total += angular_error(&want, &pred).to_degrees();
    }
    Ok(total / idx.len() as f64)
}

/// Trains a gaze estimator on a generated dataset and freezes it once the
/// held-out angular error is at most 2 degrees (gaze and, for the eval net,
/// head pose). The two roles use different depths, widths, and seeds.
pub fn train_estimator(dataset: &Dataset, role: EstimatorRole, seed: u64) -> Result<FrozenEstimator> {
    if dataset.len() < 12 {
        return Err(Error::InvalidArgument(
            "estimator training needs at least 12 samples".into(),
        ));
    }
    let res = dataset.manifest.config.resolution;
    let with_head = role == EstimatorRole::EvalNet;
    let set = load_labeled(dataset, with_head)?;
    let (train_idx, val_idx) = split_indices(set.images.len());
    let mut net = match role {
        EstimatorRole::LossNet => ConvNet::init(
            res,
            &[3, 10, 16, 24, 24],
            &[1, 2, 2, 2],
            48,
            2,
            seed ^ 0x10551,
        ),
        EstimatorRole::EvalNet => ConvNet::init(
            res,
            &[3, 10, 16, 24, 32, 32],
            &[1, 2, 2, 2, 2],
            64,
            4,
            seed ^ 0xEBA1,
        ),
    };
    let budget = SgdBudget {
        max_steps: 7000,
        batch: 8,
        check_every: 250,
        learning_rate: 2e-3,
    };
    let mut gate = |net: &ConvNet| -> bool {
        let gaze = mean_angular_error_deg(net, &set, &val_idx, 0).unwrap_or(f64::INFINITY);
        if std::env::var_os("GAZELAB_DEBUG_EST").is_some() {
            let train =
                mean_angular_error_deg(net, &set, &train_idx[..60], 0).unwrap_or(f64::INFINITY);
            eprintln!("  gate check: train {train:.3} deg, val {gaze:.3} deg");
        }
        if with_head {
            let head = mean_angular_error_deg(net, &set, &val_idx, 2).unwrap_or(f64::INFINITY);
            gaze <= 1.5 && head <= 1.5
        } else {
            gaze <= 1.5
        }
    };
    fit_regression(&mut net, &set, &train_idx, &budget, seed, &mut gate)?;
    let gaze_err = mean_angular_error_deg(&net, &set, &val_idx, 0)?;
    let head_err = if with_head {
        Some(mean_angular_error_deg(&net, &set, &val_idx, 2)?)
    } else {
        None
    };
    if gaze_err > 2.0 || head_err.is_some_and(|h| h > 2.0) {
        return Err(Error::TrainingFailure(format!(
            "estimator gate unmet after {} steps: gaze {:.2} deg, head {:?} deg (gate 2.0)",
            budget.max_steps, gaze_err, head_err
        )));
    }
    Ok(FrozenEstimator {
        role,
        net,
        validation_gaze_error_deg: gaze_err,
        validation_head_error_deg: head_err,
    })
}

/// Trains the subject-identity classifier and freezes it once held-out
/// accuracy reaches 95%.
pub fn train_identity_embedder(dataset: &Dataset, seed: u64) -> Result<IdentityEmbedder> {
    let n_subjects = dataset.manifest.n_subjects as usize;
    if n_subjects < 2 {
        return Err(Error::InvalidArgument(
            "identity training needs at least 2 subjects".into(),
        ));
    }
    let res = dataset.manifest.config.resolution;
    // one-hot targets; trained with a softmax Brier score
    let mut images = Vec::with_capacity(dataset.len());
    let mut labels = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let s = dataset.load(i)?;
        images.push(s.image);
        labels.push(s.subject_id as usize);
    }
    let (train_idx, val_idx) = split_indices(images.len());
    let mut net = ConvNet::init(
        res,
        &[3, 8, 16, 16],
        &[2, 2, 2],
        32,
        n_subjects,
        seed ^ 0x1DE4,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE3BEDDE4);
    let mut opt = Adam::new(2e-3, Some(10.0));
    let accuracy = |net: &ConvNet| -> f64 {
        let mut hit = 0usize;
        for &i in &val_idx {
            if let Ok((out, _)) = net.forward(&images[i]) {
                let arg = out
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(k, _)| k)
                    .unwrap_or(usize::MAX);
                if arg == labels[i] {
                    hit += 1;
                }
            }
        }
        hit as f64 / val_idx.len() as f64
    };
    let (max_steps, batch) = (2500usize, 8usize);
    let mut final_acc = 0.0;
    for step in 1..=max_steps {
        let mut tape = Tape::new();
        let vars = net.register(&mut tape, true);
        let mut terms = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = train_idx[rng.gen_range(0..train_idx.len())];
            let img = tape.constant(images[i].clone().into_dyn());
            let (logits, _, _) = net.forward_on_tape(&mut tape, &vars, img)?;
            // independent-logistic Brier score against the one-hot label
            let p = tape.sigmoid(logits);
            let mut onehot = Array2::zeros((1, n_subjects));
            onehot[[0, labels[i]]] = 1.0;
            let t = tape.constant(onehot.into_dyn());
            let d = tape.sub(p, t);
            let sq = tape.mul(d, d);
            terms.push(tape.sum(sq));
        }
        let total = tape.concat(&terms, 0);
        let total = tape.sum(total);
        let loss = tape.scale(total, 1.0 / batch as f64);
        if !tape.value(loss)[[0]].is_finite() {
            return Err(Error::Numeric(format!(
                "embedder loss diverged at step {step}"
            )));
        }
        let grads = tape.backward(loss);
        apply_step(&mut net, &vars, &grads, &mut opt);
        if step % 100 == 0 {
            final_acc = accuracy(&net);
            if final_acc >= 0.97 {
                break;
            }
        }
    }
    if final_acc < 0.95 {
        final_acc = accuracy(&net);
    }
    if final_acc < 0.95 {
        return Err(Error::TrainingFailure(format!(
            "identity gate unmet: accuracy {final_acc:.3} < 0.95"
        )));
    }
    Ok(IdentityEmbedder {
        net,
        n_subjects,
        validation_accuracy: final_acc,
    })
}

/// Mean angular gaze error of an estimator over a labeled image list, in
/// degrees.
pub fn gaze_error_deg(
    net: &FrozenEstimator,
    images: &[ImageGrid],
    gazes: &[GazeAngles],
) -> Result<f64> {
    if images.is_empty() || images.len() != gazes.len() {
        return Err(Error::InvalidArgument(format!(
            "need matching non-empty lists, got {} images / {} labels",
            images.len(),
            gazes.len()
        )));
    }
    let mut total = 0.0;
    for (img, gaze) in images.iter().zip(gazes) {
        let pred = pitchyaw_to_vector(net.predict_gaze(img)?);
        let want = pitchyaw_to_vector(*gaze);
        total += angular_error(&want, &pred).to_degrees();
    }
    Ok(total / images.len() as f64)
}

/// Fine-tunes a copy of a frozen estimator on a small labeled gaze set (the
/// few-shot personal-calibration step). Only the gaze components of the
/// output enter the loss; the returned estimator is a new frozen object and
/// the input stays untouched. Deterministic in the seed.
pub fn finetune_gaze_estimator(
    base: &FrozenEstimator,
    images: &[ImageGrid],
    gazes: &[GazeAngles],
    steps: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<FrozenEstimator> {
    if images.is_empty() || images.len() != gazes.len() {
        return Err(Error::InvalidArgument(format!(
            "need matching non-empty lists, got {} images / {} labels",
            images.len(),
            gazes.len()
        )));
    }
    let mut net = base.net.clone();
    let mut opt = Adam::new(learning_rate, Some(10.0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xCA11_B8A7_E000_0001);
    let batch = 4.min(images.len());
    for step in 1..=steps {
        let mut tape = Tape::new();
        let vars = net.register(&mut tape, true);
        let mut terms = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = rng.gen_range(0..images.len());
            let img = tape.constant(images[i].clone().into_dyn());
            let (out, _, _) = net.forward_on_tape(&mut tape, &vars, img)?;
            let gaze_out = tape.slice(out, 1, 0, 2);
            let t = tape.constant(
                ndarray::Array2::from_shape_vec((1, 2), vec![gazes[i].pitch, gazes[i].yaw])
                    .expect("target")
                    .into_dyn(),
            );
            let d = tape.sub(gaze_out, t);
            let sq = tape.mul(d, d);
            terms.push(tape.sum(sq));
        }
        let total = tape.concat(&terms, 0);
        let total = tape.sum(total);
        let loss = tape.scale(total, 1.0 / (2 * batch) as f64);
        if !tape.value(loss)[[0]].is_finite() {
            return Err(Error::Numeric(format!(
                "calibration loss diverged at step {step}"
            )));
        }
        let grads = tape.backward(loss);
        apply_step(&mut net, &vars, &grads, &mut opt);
    }
    Ok(FrozenEstimator {
        role: base.role,
        net,
        validation_gaze_error_deg: base.validation_gaze_error_deg,
        validation_head_error_deg: base.validation_head_error_deg,
    })
}

//! Binary checkpoint format: `"GZNF"` magic, a little-endian `u32` format
//! version, then length-prefixed named float32 tensors.
//!
//! Non-tensor payloads (the training configuration and the step/optimizer
//! metadata, both JSON) ride along as tensors whose elements are byte
//! values, keeping the container format uniform. All model parameters are
//! kept at f32 precision during training, so save -> load -> save is
//! byte-identical and resumed runs are bit-exact.

use crate::compositor::DecoderParameters;
use crate::error::{Error, Result};
use crate::field::{FieldParameters, LatentCodes};
use crate::harness::config::TrainConfig;
use crate::harness::model::GazeModel;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

/// Magic bytes opening every checkpoint file.
pub const MAGIC: &[u8; 4] = b"GZNF";
/// Format version this build reads and writes.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    step: u64,
    opt_step: u64,
    subjects: Vec<u32>,
}

/// A trained (or in-training) model together with its optimizer state and
/// step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: GazeModel,
    /// Completed optimization steps.
    pub step: u64,
    /// Adam's internal step counter.
    pub opt_step: u64,
    /// First moments, aligned with `model.trainable_names()`.
    pub opt_m: Vec<ArrayD<f64>>,
    /// Second moments, same alignment.
    pub opt_v: Vec<ArrayD<f64>>,
}

fn write_tensor(out: &mut impl Write, name: &str, tensor: &ArrayD<f64>) -> Result<()> {
    out.write_u32::<LittleEndian>(name.len() as u32)?;
    out.write_all(name.as_bytes())?;
    out.write_u32::<LittleEndian>(tensor.ndim() as u32)?;
    for d in tensor.shape() {
        out.write_u32::<LittleEndian>(*d as u32)?;
    }
    for v in tensor.iter() {
        out.write_f32::<LittleEndian>(*v as f32)?;
    }
    Ok(())
}

fn read_tensor(input: &mut impl Read) -> Result<(String, ArrayD<f64>)> {
    let name_len = input.read_u32::<LittleEndian>()? as usize;
    let mut name = vec![0u8; name_len];
    input.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|e| Error::Checkpoint(format!("tensor name not UTF-8: {e}")))?;
    let rank = input.read_u32::<LittleEndian>()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(input.read_u32::<LittleEndian>()? as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(input.read_f32::<LittleEndian>()? as f64);
    }
    let tensor = ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
    Ok((name, tensor))
}

fn bytes_to_tensor(bytes: &[u8]) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(&[bytes.len()]), bytes.iter().map(|b| *b as f64).collect())
        .expect("1-d byte tensor")
}

fn tensor_to_bytes(tensor: &ArrayD<f64>) -> Result<Vec<u8>> {
    tensor
        .iter()
        .map(|v| {
            if *v < 0.0 || *v > 255.0 || v.fract() != 0.0 {
                Err(Error::Checkpoint(format!("corrupt byte payload value {v}")))
            } else {
                Ok(*v as u8)
            }
        })
        .collect()
}

impl Checkpoint {
    /// Serializes to the canonical byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        let names = self.model.tensor_names();
        let trainable = self.model.trainable_names();
        if self.opt_m.len() != trainable.len() || self.opt_v.len() != trainable.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state covers {} tensors, model trains {}",
                self.opt_m.len(),
                trainable.len()
            )));
        }
        let n_entries = 2 + names.len() + 2 * trainable.len();
        out.write_u32::<LittleEndian>(n_entries as u32)?;
        let config_json = serde_json::to_vec(&self.config)?;
        write_tensor(&mut out, "__config", &bytes_to_tensor(&config_json))?;
        let meta = Meta {
            step: self.step,
            opt_step: self.opt_step,
            subjects: self.model.latents.keys().copied().collect(),
        };
        write_tensor(&mut out, "__meta", &bytes_to_tensor(&serde_json::to_vec(&meta)?))?;
        for name in &names {
            write_tensor(&mut out, name, &self.model.tensor(name).expect("own name"))?;
        }
        for (i, name) in trainable.iter().enumerate() {
            write_tensor(&mut out, &format!("opt.m.{name}"), &self.opt_m[i])?;
            write_tensor(&mut out, &format!("opt.v.{name}"), &self.opt_v[i])?;
        }
        Ok(out)
    }

    /// Parses the canonical byte layout. A version mismatch fails loudly,
    /// naming both the file's version and the supported one.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut input = bytes;
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = input.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {version}, this build supports version {FORMAT_VERSION}"
            )));
        }
        let n_entries = input.read_u32::<LittleEndian>()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..n_entries {
            let (name, tensor) = read_tensor(&mut input)?;
            tensors.insert(name, tensor);
        }
        let take = |tensors: &mut BTreeMap<String, ArrayD<f64>>, name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let config: TrainConfig =
            serde_json::from_slice(&tensor_to_bytes(&take(&mut tensors, "__config")?)?)?;
        let meta: Meta = serde_json::from_slice(&tensor_to_bytes(&take(&mut tensors, "__meta")?)?)?;

        let mut model = GazeModel {
            field_config: config.field,
            render_config: config.render,
            two_stream: config.ablation.two_stream,
            rotation: config.ablation.rotation,
            field_eyes: FieldParameters::zeroed(config.field)?,
            field_face: FieldParameters::zeroed(config.field)?,
            decoder: DecoderParameters::zeroed(
                config.field.feature_dim + 1,
                config.render.decoder_hidden,
                config.render.upsample_stages,
            ),
            latents: meta
                .subjects
                .iter()
                .map(|sid| (*sid, LatentCodes::zeros()))
                .collect(),
        };
        for name in model.tensor_names() {
            model.set_tensor(&name, take(&mut tensors, &name)?)?;
        }
        let trainable = model.trainable_names();
        let mut opt_m = Vec::with_capacity(trainable.len());
        let mut opt_v = Vec::with_capacity(trainable.len());
        for name in &trainable {
            opt_m.push(take(&mut tensors, &format!("opt.m.{name}"))?);
            opt_v.push(take(&mut tensors, &format!("opt.v.{name}"))?);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            config,
            model,
            step: meta.step,
            opt_step: meta.opt_step,
            opt_m,
            opt_v,
        })
    }

    /// Atomic write: temp file in the target directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Fresh optimizer state (zero moments) for a newly initialized model.
    pub fn fresh(config: TrainConfig, model: GazeModel) -> Self {
        let zeros: Vec<ArrayD<f64>> = model
            .trainable_names()
            .iter()
            .map(|n| ArrayD::zeros(model.tensor(n).expect("own name").raw_dim()))
            .collect();
        Self {
            config,
            model,
            step: 0,
            opt_step: 0,
            opt_m: zeros.clone(),
            opt_v: zeros,
        }
    }
}

//! Self-describing model checkpoints.
//!
//! Layout (little-endian): magic `"PMCK"`, version `u16`, `u32` length and
//! UTF-8 bytes of the config text, `u32` tensor count, then per tensor a
//! `u16` name length and name, a trainable flag byte, a `u8` rank, `u32`
//! dims and `f32` values.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::scalar::Scalar;
use crate::trainer::{MilModel, TrainMode};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// The experiment config the model was built from.
    pub config: String,
    pub tensors: Vec<NamedTensor>,
}

fn collect<S: Scalar, P: ParamTree<S>>(out: &mut Vec<NamedTensor>, prefix: &str, tree: &P, trainable: bool) {
    tree.visit(&mut |name, t| {
        out.push(NamedTensor {
            name: format!("{prefix}.{name}"),
            trainable,
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        })
    });
}

impl Checkpoint {
    pub fn from_model<S: Scalar>(model: &MilModel<S>, mode: TrainMode, config: String) -> Self {
        let mut tensors = Vec::new();
        collect(&mut tensors, "backbone", &model.backbone, mode == TrainMode::Full);
        if let Some(p) = &model.prompt {
            collect(&mut tensors, "prompt", p, mode != TrainMode::Conventional);
        }
        collect(&mut tensors, "head", &model.head, true);
        Checkpoint { config, tensors }
    }

    /// Overwrites every parameter of `model` with the tensor of the same
    /// name. Names and shapes must match exactly.
    pub fn restore<S: Scalar>(&self, model: &mut MilModel<S>) -> Result<()> {
        let mut expected = Vec::new();
        collect(&mut expected, "backbone", &model.backbone, false);
        if let Some(p) = &model.prompt {
            collect(&mut expected, "prompt", p, false);
        }
        collect(&mut expected, "head", &model.head, false);
        if expected.len() != self.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for (e, t) in expected.iter().zip(&self.tensors) {
            if e.name != t.name || e.shape != t.shape {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint tensor `{}` {:?} does not match model tensor `{}` {:?}",
                    t.name, t.shape, e.name, e.shape
                )));
            }
        }
        let mut it = self.tensors.iter();
        let mut load = |_: String, t: &mut Tensor<S>| {
            let src = it.next().expect("count checked");
            let vals: Vec<S> = src.data.iter().map(|&v| S::from_f64(v as f64)).collect();
            *t = Tensor::from_vec(&src.shape, vals)
                .expect("shape checked")
                .into_persistent();
        };
        model.backbone.visit_mut(&mut load);
        if let Some(p) = model.prompt.as_mut() {
            p.visit_mut(&mut load);
        }
        model.head.visit_mut(&mut load);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        buf.extend_from_slice(self.config.as_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            buf.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            buf.extend_from_slice(t.name.as_bytes());
            buf.push(u8::from(t.trainable));
            buf.push(t.shape.len() as u8);
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut pos = 0usize;
        let mut take = |len: usize| -> Result<&[u8]> {
            if bytes.len() - pos < len {
                return Err(Error::Truncated {
                    path: path.to_path_buf(),
                    detail: format!("needed {len} bytes at offset {pos}"),
                });
            }
            pos += len;
            Ok(&bytes[pos - len..pos])
        };
        let malformed = |detail: String| Error::Malformed {
            path: path.to_path_buf(),
            detail,
        };
        if take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "PMCK",
            });
        }
        let version = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let len = u32_at(take(4)?);
        let config = String::from_utf8(take(len)?.to_vec()).map_err(|e| malformed(format!("config text: {e}")))?;
        let count = u32_at(take(4)?);
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            let name =
                String::from_utf8(take(name_len)?.to_vec()).map_err(|e| malformed(format!("tensor name: {e}")))?;
            let flags = take(2)?;
            let (trainable, rank) = (flags[0] != 0, flags[1] as usize);
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32_at(take(4)?));
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| malformed(format!("tensor `{name}` is too large")))?;
            let data = take(numel * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor {
                name,
                trainable,
                shape,
                data,
            });
        }
        if pos != bytes.len() {
            return Err(malformed(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Checkpoint { config, tensors })
    }
}

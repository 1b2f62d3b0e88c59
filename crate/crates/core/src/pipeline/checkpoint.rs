//! Binary checkpoint format.
//!
//! ```text
//! "TMCK" | u32 version | u32 tensor count
//! per tensor: u32 name length | name (UTF-8) | u8 dtype (0 = f32)
//!             | u32 ndim | ndim × u32 extents | f32 payload
//! u64 trailer length | trailer (UTF-8 JSON)
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::curve::CurvePoint;
use crate::data::Vocabulary;
use crate::decoder::{build_decoder, DecoderModel};
use crate::encoder::{build_encoder, EncoderModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TMCK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
    Joint,
}

/// Validation metrics of the stored weights (absent without a validation split).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StoredMetrics {
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub stage: Stage,
    /// Curve point of the epoch whose weights were kept; `None` after zero epochs.
    pub best: Option<CurvePoint>,
    pub metrics: StoredMetrics,
    pub vocabulary: Vocabulary,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<(String, Tensor)>,
    pub meta: CheckpointMeta,
}

fn round_f32(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64).detach()
}

impl Checkpoint {
    /// Tensor values are rounded to f32, the storage precision.
    pub fn new(tensors: Vec<(String, Tensor)>, meta: CheckpointMeta) -> Self {
        Self {
            tensors: tensors.into_iter().map(|(n, t)| (n, round_f32(&t))).collect(),
            meta,
        }
    }

    pub fn from_models(encoder: &EncoderModel, decoder: Option<&DecoderModel>, meta: CheckpointMeta) -> Self {
        let mut tensors: Vec<(String, Tensor)> = encoder
            .named_parameters()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        if let Some(d) = decoder {
            tensors.extend(d.named_parameters().into_iter().map(|(n, t)| (n, t.clone())));
        }
        Self::new(tensors, meta)
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn has_decoder(&self) -> bool {
        self.tensors.iter().any(|(n, _)| n.starts_with("decoder."))
    }

    fn take_prefixed(&self, prefix: &str, expected: Vec<(String, &Tensor)>) -> Result<Vec<Tensor>> {
        let stored: Vec<&(String, Tensor)> = self.tensors.iter().filter(|(n, _)| n.starts_with(prefix)).collect();
        let bad = |message: String| Error::Format {
            path: "<checkpoint>".into(),
            message,
        };
        if stored.len() != expected.len() {
            return Err(bad(format!(
                "expected {} {prefix}* tensors, found {}",
                expected.len(),
                stored.len()
            )));
        }
        stored
            .into_iter()
            .zip(expected)
            .map(|((name, t), (want, shape))| {
                if *name != want || t.shape() != shape.shape() {
                    Err(bad(format!(
                        "tensor {name} {:?} does not fit {want} {:?}",
                        t.shape(),
                        shape.shape()
                    )))
                } else {
                    Ok(t.clone())
                }
            })
            .collect()
    }

    pub fn encoder(&self) -> Result<EncoderModel> {
        let skeleton = build_encoder(&self.meta.config.encoder, &mut ChaCha8Rng::seed_from_u64(0))?;
        let params = self.take_prefixed("encoder.", skeleton.named_parameters())?;
        skeleton.with_parameters(params)
    }

    pub fn decoder(&self) -> Result<DecoderModel> {
        if !self.has_decoder() {
            return Err(Error::Data(format!(
                "{:?} checkpoint holds no decoder",
                self.meta.stage
            )));
        }
        let config = self.meta.config.decoder_config(self.meta.vocabulary.len());
        let skeleton = build_decoder(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let params = self.take_prefixed("decoder.", skeleton.named_parameters())?;
        skeleton.with_parameters(params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let trailer = serde_json::to_vec(&self.meta).expect("metadata serializes");
        out.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
        out.extend_from_slice(&trailer);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.error("bad magic bytes, expected TMCK"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(&format!("unsupported version {version}, expected {VERSION}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.error("tensor name is not UTF-8"))?
                .to_string();
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(r.error(&format!("tensor {name}: unknown dtype {dtype}")));
            }
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| r.error(&format!("tensor {name}: payload exceeds file")))?;
            let data: Vec<f64> = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| r.error(&format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        let len = r.u64()?;
        let len = usize::try_from(len).map_err(|_| r.error("trailer too large"))?;
        let trailer = r.take(len)?;
        let meta: CheckpointMeta = serde_json::from_slice(trailer).map_err(|e| r.error(&format!("metadata: {e}")))?;
        if r.remaining() != 0 {
            return Err(r.error(&format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { tensors, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    checkpoint.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn error(&self, message: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            message: message.to_string(),
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.error(&format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

//! Binary checkpoints.
//!
//! Layout (little-endian): the 8 magic bytes `DIRLCKPT`, a `u32` format
//! version, a `u64` header length, a JSON header (configs, vocabulary,
//! iteration, optimizer scalars, parameter names and shapes), then the raw
//! `f64` values of every parameter, every first moment and every second
//! moment, each group in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::decoder::Decoded;
use crate::error::{Error, Result};
use crate::model::{caption_batch, ModelConfig, ParamStore};
use crate::optim::Adam;
use crate::scenes::FeatureGrid;
use crate::tensor::Tensor;
use crate::vocab::Vocab;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DIRLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub adam: Adam,
    /// Completed training steps.
    pub iteration: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    model: ModelConfig,
    vocab: Vocab,
    iteration: u64,
    adam_t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    params: Vec<(String, Vec<usize>)>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            iteration: self.iteration,
            adam_t: self.adam.t,
            beta1: self.adam.beta1,
            beta2: self.adam.beta2,
            eps: self.adam.eps,
            params: self
                .params
                .names()
                .iter()
                .cloned()
                .zip(self.params.values().iter().map(|t| t.shape().to_vec()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let scalars = self.params.scalar_count();
        let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + 3 * 8 * scalars);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for group in [self.params.values(), &self.adam.m, &self.adam.v] {
            for t in group {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad magic, expected DIRLCKPT"));
        }
        if bytes.len() < PREFIX_LEN {
            return Err(Error::format(
                bytes.len() as u64,
                "truncated checkpoint prefix",
            ));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                8,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(PREFIX_LEN))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                Error::format(
                    bytes.len() as u64,
                    format!("truncated header of {header_len} bytes"),
                )
            })?;
        let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..header_end])
            .map_err(|e| Error::format(PREFIX_LEN as u64, format!("checkpoint header: {e}")))?;

        let mut offset = header_end;
        let mut read_group = |what: &str| -> Result<Vec<Tensor>> {
            header
                .params
                .iter()
                .map(|(name, shape)| {
                    let n: usize = shape.iter().product();
                    let end = offset + 8 * n;
                    if end > bytes.len() {
                        return Err(Error::format(
                            bytes.len() as u64,
                            format!("truncated {what} of {name}"),
                        ));
                    }
                    let data = bytes[offset..end]
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                        .collect();
                    let at = offset;
                    offset = end;
                    Tensor::new(shape.clone(), data)
                        .map_err(|e| Error::format(at as u64, format!("{name}: {e}")))
                })
                .collect()
        };
        let values = read_group("parameter")?;
        let m = read_group("first moment")?;
        let v = read_group("second moment")?;
        if offset != bytes.len() {
            return Err(Error::format(
                offset as u64,
                "trailing bytes after checkpoint payload",
            ));
        }
        let mut params = ParamStore::default();
        for ((name, _), t) in header.params.iter().zip(values) {
            params.insert(name, t);
        }
        header.model.validate()?;
        Ok(Self {
            config: header.config,
            model: header.model,
            vocab: header.vocab,
            params,
            adam: Adam {
                beta1: header.beta1,
                beta2: header.beta2,
                eps: header.eps,
                t: header.adam_t,
                m,
                v,
            },
            iteration: header.iteration,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Greedy captions for before/after pairs.
    pub fn caption(&self, before: &[&FeatureGrid], after: &[&FeatureGrid]) -> Result<Vec<Decoded>> {
        caption_batch(&self.params, &self.model, before, after)
    }
}

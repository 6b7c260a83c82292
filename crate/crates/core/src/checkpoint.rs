//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 8            | magic `RRNNCKPT`                          |
//! | 4            | format version (`u32`, currently 1)       |
//! | 8            | header length `H` (`u64`)                 |
//! | H            | UTF-8 JSON [`CheckpointHeader`]           |
//! | 8 × N        | tensor payload, `f64` little-endian       |
//!
//! The header lists every tensor with its name, shape and element offset
//! into the payload, in [`crate::model::ParamList`] order. Raw `f64` bytes
//! make a save/load round trip bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{LanguageModel, ModelConfig};
use crate::restriction::RestrictionPlan;
use crate::tensor::Tensor;
use crate::training::TrainConfig;

const MAGIC: &[u8; 8] = b"RRNNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Gate order per layer, e.g. `["i", "f", "g", "o"]`.
    pub gate_order: Vec<String>,
    pub plans: Vec<RestrictionPlan>,
    pub tensors: Vec<TensorEntry>,
    pub vocab: Vec<String>,
    pub unk: Option<u32>,
    pub train: Option<TrainConfig>,
    /// Number of completed epochs when saved.
    pub epoch: usize,
}

/// A model together with the metadata needed to reuse it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: LanguageModel,
    pub vocab: Vocabulary,
    pub train: Option<TrainConfig>,
    pub epoch: usize,
}

fn tensor_names(model: &LanguageModel) -> Vec<String> {
    let mut names = Vec::new();
    for l in 0..model.layers.len() {
        names.push(format!("layer{l}.pool_weight"));
        names.push(format!("layer{l}.pool_bias"));
    }
    names.push("embedding".into());
    if model.head.decoder.is_some() {
        names.push("decoder_weight".into());
    }
    names.push("decoder_bias".into());
    names
}

impl Checkpoint {
    pub fn header(&self) -> CheckpointHeader {
        let mut offset = 0;
        let tensors = tensor_names(&self.model)
            .into_iter()
            .zip(self.model.params())
            .map(|(name, t)| {
                let e = TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        CheckpointHeader {
            model: self.model.config.clone(),
            gate_order: self.model.config.family.gate_order().iter().map(|s| s.to_string()).collect(),
            plans: self.model.layers.iter().map(|l| l.plan.clone()).collect(),
            tensors,
            vocab: self.vocab.tokens().to_vec(),
            unk: self.vocab.unk(),
            train: self.train.clone(),
            epoch: self.epoch,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let params = self.model.params();
        let payload: usize = params.iter().map(|t| t.len()).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 8 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| fail("truncated"))?;
        if body.len() < hlen {
            return Err(fail("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
        let payload = &body[hlen..];
        if payload.len() % 8 != 0 {
            return Err(fail("payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let expected_order: Vec<String> =
            header.model.family.gate_order().iter().map(|s| s.to_string()).collect();
        if header.gate_order != expected_order {
            return Err(fail(&format!(
                "gate order {:?} does not match {:?}",
                header.gate_order, expected_order
            )));
        }
        let mut params = Vec::with_capacity(header.tensors.len());
        let mut end = 0;
        for e in &header.tensors {
            let len: usize = e.shape.iter().product();
            if e.offset != end || e.offset + len > values.len() {
                return Err(fail(&format!("tensor {} lies outside the payload", e.name)));
            }
            params.push(Tensor::new(&e.shape, values[e.offset..e.offset + len].to_vec())?);
            end = e.offset + len;
        }
        if end != values.len() {
            return Err(fail("trailing payload bytes"));
        }
        let model = LanguageModel::from_params(header.model, params)?;
        let stored_plans: Vec<&RestrictionPlan> = model.layers.iter().map(|l| &l.plan).collect();
        if header.plans.len() != stored_plans.len() || header.plans.iter().zip(stored_plans).any(|(a, b)| a != b) {
            return Err(fail("restriction plans disagree with the model config"));
        }
        let vocab = Vocabulary::from_tokens(header.vocab, header.unk)?;
        if vocab.len() != model.vocab() {
            return Err(fail("vocabulary size disagrees with the embedding table"));
        }
        Ok(Self {
            model,
            vocab,
            train: header.train,
            epoch: header.epoch,
        })
    }

    /// Writes atomically: a temporary sibling file is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Header only, without decoding the payload.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Format("checkpoint: bad magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len());
    let end = end.ok_or_else(|| Error::Format("checkpoint: truncated header".into()))?;
    Ok(serde_json::from_slice(&bytes[20..end])?)
}

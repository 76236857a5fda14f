//! Versioned tensor container used for checkpoints and trajectory dumps.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `MOLRLTNS` |
//! | 4     | `u32` format version (currently 1) |
//! | 8     | `u64` header length `H` in bytes |
//! | H     | UTF-8 JSON header |
//! | rest  | IEEE-754 `f64` payloads, one per header tensor, in header order |
//!
//! The header is `{"kind": ..., "meta": {...}, "tensors": [{"name", "shape"}, ...]}`;
//! a tensor's element count is the product of its shape and its data is
//! row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{AdamConfig, AdamState, Architecture, DenoiserParams, Weights};
use crate::error::{Error, Result};
use crate::molgraph::{AtomVocabulary, VocabularySpec};

pub const MAGIC: &[u8; 8] = b"MOLRLTNS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serializes a container to bytes.
pub fn encode_container(
    kind: &str,
    meta: serde_json::Value,
    tensors: &[(&str, &[usize], &[f64])],
) -> Result<Vec<u8>> {
    for (name, shape, data) in tensors {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {shape:?} but {} values",
                data.len()
            )));
        }
    }
    let header = Header {
        kind: kind.to_string(),
        meta,
        tensors: tensors
            .iter()
            .map(|(n, s, _)| TensorInfo {
                name: n.to_string(),
                shape: s.to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = tensors.iter().map(|t| t.2.len() * 8).sum();
    let mut out = Vec::with_capacity(20 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in tensors {
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a container, returning `(kind, meta, tensors)`.
pub fn decode_container(bytes: &[u8]) -> Result<(String, serde_json::Value, Vec<Tensor>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a tensor container (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported container version {version}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes
        .get(20..20 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut at = 20 + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for info in header.tensors {
        let count: usize = info.shape.iter().product();
        let raw = bytes
            .get(at..at + count * 8)
            .ok_or_else(|| Error::Checkpoint(format!("truncated payload for {}", info.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        at += count * 8;
        tensors.push(Tensor {
            name: info.name,
            shape: info.shape,
            data,
        });
    }
    if at != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok((header.kind, header.meta, tensors))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub steps: usize,
    pub clamp: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    architecture: Architecture,
    vocabulary: VocabularySpec,
    schedule: ScheduleMeta,
    training_step: u64,
    #[serde(default)]
    adam: Option<AdamMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdamMeta {
    step: u64,
    config: AdamConfig,
}

/// Model weights with everything needed to rebuild the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub vocabulary: AtomVocabulary,
    pub schedule: ScheduleMeta,
    pub training_step: u64,
    pub optimizer: Option<AdamState>,
}

fn fill_weights(target: &mut Weights, tensors: &[Tensor], prefix: &str) -> Result<()> {
    let names: Vec<(String, Vec<usize>)> = target
        .tensors()
        .into_iter()
        .map(|(n, _, s)| (n, s))
        .collect();
    for ((name, shape), slot) in names.into_iter().zip(target.tensors_mut()) {
        let full = format!("{prefix}{name}");
        let t = tensors
            .iter()
            .find(|t| t.name == full)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {full}")))?;
        if t.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {full} has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        slot.copy_from_slice(&t.data);
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            architecture: self.params.arch,
            vocabulary: self.vocabulary.clone().into(),
            schedule: self.schedule,
            training_step: self.training_step,
            adam: self.optimizer.as_ref().map(|s| AdamMeta {
                step: s.step,
                config: s.config,
            }),
        };
        let mut named: Vec<(String, Vec<usize>, &[f64])> = self
            .params
            .weights
            .tensors()
            .into_iter()
            .map(|(n, d, s)| (n, s, d))
            .collect();
        if let Some(opt) = &self.optimizer {
            for (prefix, w) in [("adam.m.", &opt.m), ("adam.v.", &opt.v)] {
                named.extend(
                    w.tensors()
                        .into_iter()
                        .map(|(n, d, s)| (format!("{prefix}{n}"), s, d)),
                );
            }
        }
        let refs: Vec<(&str, &[usize], &[f64])> = named
            .iter()
            .map(|(n, s, d)| (n.as_str(), s.as_slice(), *d))
            .collect();
        encode_container("checkpoint", serde_json::to_value(meta)?, &refs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (kind, meta, tensors) = decode_container(bytes)?;
        if kind != "checkpoint" {
            return Err(Error::Checkpoint(format!(
                "container holds a {kind}, not a checkpoint"
            )));
        }
        let meta: CheckpointMeta = serde_json::from_value(meta)?;
        meta.architecture.validate()?;
        let vocabulary: AtomVocabulary = meta.vocabulary.try_into()?;
        if vocabulary.len() != meta.architecture.vocab_size {
            return Err(Error::Checkpoint(
                "vocabulary size disagrees with architecture".into(),
            ));
        }
        let mut weights = Weights::zeros(&meta.architecture);
        fill_weights(&mut weights, &tensors, "")?;
        let params = DenoiserParams {
            arch: meta.architecture,
            weights,
        };
        let optimizer = match meta.adam {
            Some(a) => {
                let mut st = AdamState::new(&params, a.config);
                st.step = a.step;
                fill_weights(&mut st.m, &tensors, "adam.m.")?;
                fill_weights(&mut st.v, &tensors, "adam.v.")?;
                Some(st)
            }
            None => None,
        };
        Ok(Self {
            params,
            vocabulary,
            schedule: meta.schedule,
            training_step: meta.training_step,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}

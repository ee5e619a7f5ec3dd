//! Binary checkpoint format.
//!
//! ```text
//! "AG4CKPT1"            8 bytes
//! version               u8  (1)
//! config digest         32 bytes, SHA-256 of the model + train config JSON
//! stage tag             u8  (1 | 2)
//! schedule step         u64
//! array count           u32
//! per array:            u32 name length, UTF-8 name,
//!                       u32 rank, u32 dims..., f64 values (row-major)
//! payload digest        32 bytes, SHA-256 of everything above
//! ```
//!
//! All integers and floats are little-endian. Array names are
//! `param/<path>`, `adam.m/<path>` and `adam.v/<path>`.

use super::optim::{Moment, Moments};
use super::Stage;
use crate::model::{layout, Model, ModelConfig, ModelWeights};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use sha2::{Digest, Sha256};
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AG4CKPT1";
pub const CHECKPOINT_VERSION: u8 = 1;

const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

/// Region of a checkpoint file, for error reporting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Section {
    Magic,
    Version,
    ConfigDigest,
    StageTag,
    Step,
    ArrayCount,
    Array { index: usize, name: Option<String> },
    PayloadDigest,
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Section::Magic => f.write_str("magic"),
            Section::Version => f.write_str("version"),
            Section::ConfigDigest => f.write_str("config digest"),
            Section::StageTag => f.write_str("stage tag"),
            Section::Step => f.write_str("schedule step"),
            Section::ArrayCount => f.write_str("array count"),
            Section::Array { index, name: Some(n) } => write!(f, "array #{index} `{n}`"),
            Section::Array { index, name: None } => write!(f, "array #{index}"),
            Section::PayloadDigest => f.write_str("payload digest"),
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint ({section}): {detail}")]
    Corrupt { section: Section, detail: String },
    #[error("checkpoint was written for a different configuration")]
    ConfigMismatch,
    #[error("checkpoint does not match the model layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn corrupt(section: Section, detail: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt {
        section,
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    pub stage: Stage,
    /// Number of optimizer steps already taken.
    pub step: u64,
    /// Every model parameter by path, canonical order.
    pub params: IndexMap<String, Tensor>,
    pub moments: Moments,
}

impl Checkpoint {
    pub fn capture(model: &Model, moments: &Moments, step: u64, stage: Stage, config_digest: [u8; 32]) -> Self {
        let params = model
            .weights
            .entries()
            .into_iter()
            .map(|(i, t)| (i.path, t.clone()))
            .collect();
        Self {
            config_digest,
            stage,
            step,
            params,
            moments: moments.clone(),
        }
    }

    /// Rebuilds the model; names and shapes must match `config`'s layout.
    pub fn to_model(&self, config: &ModelConfig) -> Result<Model, CheckpointError> {
        let shapes = layout(config).map_err(|e| CheckpointError::Layout(e.to_string()))?;
        let n = shapes.entries().len();
        if n != self.params.len() {
            return Err(CheckpointError::Layout(format!(
                "{} stored parameters, layout has {n}",
                self.params.len()
            )));
        }
        let weights: ModelWeights = shapes.try_map(|info, shape| {
            let t = self
                .params
                .get(&info.path)
                .ok_or_else(|| CheckpointError::Layout(format!("missing `{}`", info.path)))?;
            if t.shape() != shape.as_slice() {
                return Err(CheckpointError::Layout(format!(
                    "`{}` has shape {:?}, expected {shape:?}",
                    info.path,
                    t.shape()
                )));
            }
            Ok(t.clone())
        })?;
        Ok(Model {
            config: config.clone(),
            weights,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&self.config_digest);
        out.push(self.stage.tag());
        out.extend_from_slice(&self.step.to_le_bytes());
        let arrays: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|(k, t)| (format!("{PARAM}{k}"), t))
            .chain(
                self.moments
                    .entries
                    .iter()
                    .flat_map(|(k, m)| [(format!("{ADAM_M}{k}"), &m.m), (format!("{ADAM_V}{k}"), &m.v)]),
            )
            .collect();
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, t) in arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, Section::Magic)? != CHECKPOINT_MAGIC {
            return Err(corrupt(Section::Magic, "not an AG4CKPT1 file"));
        }
        let version = r.u8(Section::Version)?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(Section::Version, format!("unsupported version {version}")));
        }
        // The trailing digest covers everything before it; verify up front so
        // a flipped byte anywhere is reported before parsing garbage.
        if bytes.len() >= 8 + 1 + 32 + 32 {
            let (payload, stored) = bytes.split_at(bytes.len() - 32);
            if Sha256::digest(payload).as_slice() != stored {
                return Err(corrupt(Section::PayloadDigest, "payload digest mismatch"));
            }
        }
        let mut config_digest = [0u8; 32];
        config_digest.copy_from_slice(r.take(32, Section::ConfigDigest)?);
        let tag = r.u8(Section::StageTag)?;
        let stage =
            Stage::from_tag(tag).ok_or_else(|| corrupt(Section::StageTag, format!("unknown stage tag {tag}")))?;
        let step = u64::from_le_bytes(r.take(8, Section::Step)?.try_into().unwrap());
        let count = r.u32(Section::ArrayCount)? as usize;

        let mut params = IndexMap::new();
        let mut m_arrays: IndexMap<String, Tensor> = IndexMap::new();
        let mut v_arrays: IndexMap<String, Tensor> = IndexMap::new();
        for index in 0..count {
            let sec = Section::Array { index, name: None };
            let name_len = r.u32(sec.clone())? as usize;
            let name = std::str::from_utf8(r.take(name_len, sec.clone())?)
                .map_err(|_| corrupt(sec.clone(), "name is not UTF-8"))?
                .to_string();
            let sec = Section::Array {
                index,
                name: Some(name.clone()),
            };
            let rank = r.u32(sec.clone())? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32(sec.clone())? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| corrupt(sec.clone(), "dimension overflow"))?;
            let data = r
                .take(n, sec.clone())?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| corrupt(sec.clone(), e.to_string()))?;
            let slot = if let Some(p) = name.strip_prefix(PARAM) {
                params.insert(p.to_string(), t)
            } else if let Some(p) = name.strip_prefix(ADAM_M) {
                m_arrays.insert(p.to_string(), t)
            } else if let Some(p) = name.strip_prefix(ADAM_V) {
                v_arrays.insert(p.to_string(), t)
            } else {
                return Err(corrupt(sec, "unknown array prefix"));
            };
            if slot.is_some() {
                return Err(corrupt(sec, "duplicate array name"));
            }
        }
        let digest = r.take(32, Section::PayloadDigest)?;
        if Sha256::digest(&bytes[..r.pos - 32]).as_slice() != digest {
            return Err(corrupt(Section::PayloadDigest, "payload digest mismatch"));
        }
        if r.pos != bytes.len() {
            return Err(corrupt(Section::PayloadDigest, "trailing bytes after digest"));
        }
        if m_arrays.len() != v_arrays.len() || m_arrays.keys().any(|k| !v_arrays.contains_key(k)) {
            return Err(corrupt(Section::ArrayCount, "optimizer moments are not paired"));
        }
        let entries = m_arrays
            .into_iter()
            .map(|(k, m)| {
                let v = v_arrays.swap_remove(&k).expect("paired above");
                (k, Moment { m, v })
            })
            .collect();
        Ok(Self {
            config_digest,
            stage,
            step,
            params,
            moments: Moments { entries },
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: Section) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                corrupt(
                    section,
                    format!(
                        "truncated: need {n} bytes at offset {}, file has {}",
                        self.pos,
                        self.bytes.len()
                    ),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, section: Section) -> Result<u8, CheckpointError> {
        Ok(self.take(1, section)?[0])
    }

    fn u32(&mut self, section: Section) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let model = Model::init(ModelConfig::reference_toy(), 3).unwrap();
        let mut moments = Moments::default();
        let mut m = Moment::zeros_like(&model.weights.projection.bias);
        m.m.data_mut()[0] = 0.5;
        m.v.data_mut()[1] = 1e-300;
        moments.entries.insert("projection.bias".into(), m);
        Checkpoint::capture(&model, &moments, 7, Stage::Stage2, [9u8; 32])
    }

    #[test]
    fn round_trip_is_lossless_and_stable() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        for (k, t) in &c.params {
            assert!(back.params[k].bitwise_eq(t));
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..8], b"AG4CKPT1");
        assert_eq!(bytes[8], 1);
        assert_eq!(&bytes[9..41], &[9u8; 32]);
        assert_eq!(bytes[41], 2);
        assert_eq!(u64::from_le_bytes(bytes[42..50].try_into().unwrap()), 7);
    }

    #[test]
    fn truncation_is_reported_not_panicking() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 9, 40, 45, 60, 300, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, CheckpointError::Corrupt { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn corruption_names_section() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'Z';
        match Checkpoint::from_bytes(&bytes).unwrap_err() {
            CheckpointError::Corrupt { section, .. } => assert_eq!(section, Section::Magic),
            e => panic!("{e}"),
        }
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        match Checkpoint::from_bytes(&bytes).unwrap_err() {
            CheckpointError::Corrupt { section, .. } => assert_eq!(section, Section::PayloadDigest),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn restores_model_and_checks_layout() {
        let c = sample();
        let m = c.to_model(&ModelConfig::reference_toy()).unwrap();
        assert!(m
            .weights
            .bitwise_eq(&Model::init(ModelConfig::reference_toy(), 3).unwrap().weights));
        let mut other = ModelConfig::reference_toy();
        other.n_blocks = 3;
        assert!(matches!(c.to_model(&other), Err(CheckpointError::Layout(_))));
    }
}

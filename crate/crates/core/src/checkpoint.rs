//! Single-file model checkpoints.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! magic    8 bytes  "EIANETCK"
//! version  u32
//! hlen     u64      length of the header in bytes
//! header   hlen     UTF-8 JSON: format version, run config, phase, epoch,
//!                   classifier kind/seed/scale, and the name and shape of
//!                   every block below
//! blocks            per block: u64 element count, then that many f64
//! ```
//!
//! Blocks appear in a fixed order: the classifier matrix `[d, K]`, then the
//! encoder parameters (per conv block weight and bias, attention `wq`, `wk`,
//! `wv`, `gamma`, projection weight and bias), then one momentum buffer per
//! optimizer slot.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::config::RunConfig;
use crate::encoder::{init_encoder, EncoderModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EIANETCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Source,
    Adapt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub phase: Phase,
    pub epoch: usize,
    pub encoder: EncoderModel,
    pub classifier: Classifier,
    pub momentum: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ClassifierKind {
    Etf,
    Linear,
}

#[derive(Serialize, Deserialize)]
struct ClassifierHeader {
    kind: ClassifierKind,
    seed: u64,
    logit_scale: f64,
}

#[derive(Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: RunConfig,
    phase: Phase,
    epoch: usize,
    classifier: ClassifierHeader,
    encoder_blocks: usize,
    blocks: Vec<BlockHeader>,
}

fn encoder_names(encoder: &EncoderModel) -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..encoder.blocks.len() {
        names.push(format!("conv{i}.weight"));
        names.push(format!("conv{i}.bias"));
    }
    for p in ["wq", "wk", "wv", "gamma"] {
        names.push(format!("attention.{p}"));
    }
    names.push("proj.weight".into());
    names.push("proj.bias".into());
    names
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blocks: Vec<(String, &Tensor)> = vec![("classifier".into(), self.classifier.matrix())];
        blocks.extend(encoder_names(&self.encoder).into_iter().zip(self.encoder.parameters()));
        blocks.extend(self.momentum.iter().enumerate().map(|(i, t)| (format!("momentum.{i}"), t)));

        let (kind, seed) = match &self.classifier {
            Classifier::Etf(e) => (ClassifierKind::Etf, e.seed()),
            Classifier::Linear(_) => (ClassifierKind::Linear, 0),
        };
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            phase: self.phase,
            epoch: self.epoch,
            classifier: ClassifierHeader {
                kind,
                seed,
                logit_scale: self.classifier.logit_scale(),
            },
            encoder_blocks: self.encoder.parameters().len(),
            blocks: blocks
                .iter()
                .map(|(name, t)| BlockHeader {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Contract(e.to_string()))?;

        let payload: usize = blocks.iter().map(|(_, t)| 8 + 8 * t.numel()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &blocks {
            out.extend_from_slice(&(t.numel() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint; `origin` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(origin, msg);
        let mut cur = Cursor { bytes, pos: 0 };

        let magic = cur.take(8).ok_or_else(|| bad("file shorter than the magic bytes".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic bytes)".into()));
        }
        let version = cur.u64_sized::<4>().ok_or_else(|| bad("truncated version".into()))? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = cur.u64_sized::<8>().ok_or_else(|| bad("truncated header length".into()))? as usize;
        let json = cur
            .take(hlen)
            .ok_or_else(|| bad(format!("header of {hlen} bytes runs past end of file")))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
        header.config.validate()?;

        let mut tensors = Vec::with_capacity(header.blocks.len());
        for b in &header.blocks {
            let at = cur.pos;
            let count = cur
                .u64_sized::<8>()
                .ok_or_else(|| bad(format!("block {} truncated at byte {at}", b.name)))? as usize;
            let want: usize = b.shape.iter().product();
            if count != want {
                return Err(bad(format!(
                    "block {} at byte {at} holds {count} values, shape {:?} needs {want}",
                    b.name, b.shape
                )));
            }
            let raw = cur.take(count * 8).ok_or_else(|| {
                bad(format!("block {} at byte {at}: expected {} bytes, found {}", b.name, count * 8, bytes.len() - cur.pos))
            })?;
            let mut t = Tensor::zeros(&b.shape);
            for (v, c) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *v = f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
            }
            tensors.push(t);
        }
        if cur.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes after the last block", bytes.len() - cur.pos)));
        }

        let mut encoder = init_encoder(&header.config, 0)?;
        let n_enc = encoder.parameters().len();
        if header.encoder_blocks != n_enc || tensors.len() < 1 + n_enc {
            return Err(bad(format!(
                "header lists {} encoder blocks, config implies {n_enc}",
                header.encoder_blocks
            )));
        }
        let mut rest = tensors.into_iter();
        let matrix = rest.next().expect("classifier block");
        for (slot, t) in encoder.parameters_mut().into_iter().zip(rest.by_ref()) {
            if slot.shape() != t.shape() {
                return Err(bad(format!(
                    "encoder block shape {:?} does not match config shape {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        let classifier = Classifier::from_matrix(
            matrix,
            matches!(header.classifier.kind, ClassifierKind::Etf),
            header.classifier.seed,
            header.classifier.logit_scale,
        )?;
        if classifier.classes() != header.config.classes || classifier.dim() != header.config.feature_dim {
            return Err(bad(format!(
                "classifier block {:?} does not match config ({} classes, {} dims)",
                classifier.matrix().shape(),
                header.config.classes,
                header.config.feature_dim
            )));
        }
        Ok(Self {
            config: header.config,
            phase: header.phase,
            epoch: header.epoch,
            encoder,
            classifier,
            momentum: rest.collect(),
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u64_sized<const N: usize>(&mut self) -> Option<u64> {
        let s = self.take(N)?;
        let mut buf = [0u8; 8];
        buf[..N].copy_from_slice(s);
        Some(u64::from_le_bytes(buf))
    }
}

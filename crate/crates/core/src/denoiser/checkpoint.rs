//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes            | content                                             |
//! |------------------|-----------------------------------------------------|
//! | 4                | magic `TDCK`                                        |
//! | 4                | format version, `u32`                               |
//! | 8                | header length `n`, `u64`                            |
//! | n                | UTF-8 JSON header                                   |
//! | 8 per scalar     | parameter values as `f64`, in header order          |
//! | 32               | SHA-256 of every preceding byte                     |
//!
//! The JSON header holds `config` (the denoiser configuration), `alphabet`
//! (activity labels in index order), `metadata` (epochs, loss history,
//! training seed, schedule betas) and `params`, a list of `{name, shape}`
//! entries. Each parameter's values follow in row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracediff_tensor::Tensor;

use super::{DenoiserConfig, DenoiserModel};
use crate::error::{Error, Result};
use crate::event_log::Alphabet;

pub const MAGIC: &[u8; 4] = b"TDCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epochs: usize,
    pub loss_history: Vec<f64>,
    pub seed: u64,
    /// `(beta_1, beta_T)` of the training schedule, so recovery can rebuild it.
    #[serde(default)]
    pub beta: Option<(f64, f64)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: DenoiserConfig,
    alphabet: Vec<String>,
    metadata: CheckpointMeta,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub alphabet: Alphabet,
    pub metadata: CheckpointMeta,
}

pub fn to_bytes(model: &DenoiserModel, alphabet: &Alphabet, metadata: &CheckpointMeta) -> Result<Vec<u8>> {
    if alphabet.len() != model.config().num_activities {
        return Err(Error::invalid(format!(
            "alphabet has {} activities but the model expects {}",
            alphabet.len(),
            model.config().num_activities
        )));
    }
    let header = Header {
        config: model.config().clone(),
        alphabet: alphabet.labels().to_vec(),
        metadata: metadata.clone(),
        params: model
            .params()
            .iter()
            .map(|(_, name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::invalid(format!("encoding header: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len() + model.params().scalar_count() * 8 + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in model.params().iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let fail = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 16 + 32 {
        return Err(fail("file is truncated".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fail(format!("unsupported format version {version}, expected {VERSION}")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(fail("checksum mismatch (file is corrupt or truncated)".into()));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| fail("header length exceeds file size".into()))?;
    let header: Header = serde_json::from_slice(&body[16..header_end])
        .map_err(|e| fail(format!("bad header: {e}")))?;
    let alphabet = Alphabet::new(header.alphabet).map_err(|e| fail(e.to_string()))?;
    if alphabet.len() != header.config.num_activities {
        return Err(fail("alphabet size disagrees with the stored config".into()));
    }
    let mut model = DenoiserModel::new(header.config).map_err(|e| fail(e.to_string()))?;

    let payload = &body[header_end..];
    let expected: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if payload.len() != expected * 8 {
        return Err(fail(format!(
            "payload holds {} bytes, header describes {}",
            payload.len(),
            expected * 8
        )));
    }
    if header.params.len() != model.params().len() {
        return Err(fail(format!(
            "checkpoint has {} parameters, config implies {}",
            header.params.len(),
            model.params().len()
        )));
    }
    let mut offset = 0;
    for entry in &header.params {
        let id = model
            .params()
            .find(&entry.name)
            .ok_or_else(|| fail(format!("unknown parameter `{}`", entry.name)))?;
        let slot = model.params().get(id);
        if slot.shape() != entry.shape.as_slice() {
            return Err(fail(format!(
                "parameter `{}` has shape {:?}, config implies {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        let n = slot.len();
        let data: Vec<f64> = payload[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += n * 8;
        *model.params_mut().get_mut(id) = Tensor::new(entry.shape.clone(), data)?;
    }
    Ok(Checkpoint {
        model,
        alphabet,
        metadata: header.metadata,
    })
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &DenoiserModel,
    alphabet: &Alphabet,
    metadata: &CheckpointMeta,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model, alphabet, metadata)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; when `expected` is given its labels must match the
/// stored alphabet exactly.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&Alphabet>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = from_bytes(&bytes, path)?;
    if let Some(alphabet) = expected {
        if alphabet.labels() != ck.alphabet.labels() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!(
                    "checkpoint alphabet has {} activities {:?}, expected {} {:?}",
                    ck.alphabet.len(),
                    ck.alphabet.labels(),
                    alphabet.len(),
                    alphabet.labels()
                ),
            });
        }
    }
    Ok(ck)
}

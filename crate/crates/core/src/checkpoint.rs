//! Binary checkpoint container.
//!
//! ```text
//! magic     8 bytes   "IMNCKPT1"
//! length    u64 LE    byte length of the header
//! header    JSON      {"version", "config", "vocabulary", "parameters": [{"name", "group", "shape"}]}
//! data      f64 LE    every parameter's values, row-major, in header order
//! ```
//!
//! The vocabulary lists tokens from id 2 on; PAD and UNK are implicit.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{ImnError, Result};
use crate::model::Imn;
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 8] = b"IMNCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    group: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: RunConfig,
    vocabulary: Vec<String>,
    parameters: Vec<ParamEntry>,
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub model: Imn,
}

fn ckpt_err(msg: impl Into<String>) -> ImnError {
    ImnError::Checkpoint(msg.into())
}

pub fn to_bytes(config: &RunConfig, vocab: &Vocabulary, model: &Imn) -> Result<Vec<u8>> {
    if &config.model != model.config() {
        return Err(ckpt_err("run config does not describe the model being saved"));
    }
    let header = Header {
        version: VERSION,
        config: config.clone(),
        vocabulary: vocab.tokens()[2..].to_vec(),
        parameters: model
            .params()
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                group: p.group.name().to_string(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ckpt_err(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * model.params().num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.params().iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(ckpt_err("not an IMN checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(ckpt_err("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..len]).map_err(|e| ckpt_err(format!("bad header: {e}")))?;
    if header.version != VERSION {
        return Err(ckpt_err(format!("unsupported version {}", header.version)));
    }
    let vocab = Vocabulary::from_tokens(header.vocabulary);
    let mc = header.config.model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Imn::new(
        mc.clone(),
        Tensor::zeros(&[vocab.len(), mc.general_dim]),
        Tensor::zeros(&[vocab.len(), mc.domain_dim]),
        &mut rng,
    )
    .map_err(|e| ckpt_err(e.to_string()))?;

    let ids: Vec<_> = model.params().ids().collect();
    if ids.len() != header.parameters.len() {
        return Err(ckpt_err(format!(
            "{} parameters stored, model has {}",
            header.parameters.len(),
            ids.len()
        )));
    }
    let mut data = &body[len..];
    for (&id, entry) in ids.iter().zip(&header.parameters) {
        let p = model.params().get(id);
        if p.name != entry.name || p.group.name() != entry.group || p.value.shape() != entry.shape {
            return Err(ckpt_err(format!(
                "stored parameter {} {} {:?} does not match {} {} {:?}",
                entry.name,
                entry.group,
                entry.shape,
                p.name,
                p.group.name(),
                p.value.shape()
            )));
        }
        let n = p.value.numel();
        if data.len() < 8 * n {
            return Err(ckpt_err(format!("truncated data for {}", entry.name)));
        }
        let values: Vec<f64> = data[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data = &data[8 * n..];
        model.params_mut().value_mut(id).data_mut().copy_from_slice(&values);
    }
    if !data.is_empty() {
        return Err(ckpt_err(format!("{} trailing bytes", data.len())));
    }
    Ok(Checkpoint {
        config: header.config,
        vocab,
        model,
    })
}

/// Writes through a temporary sibling and renames, so a failed save never
/// leaves a partial checkpoint at `path`.
pub fn save(path: impl AsRef<Path>, config: &RunConfig, vocab: &Vocabulary, model: &Imn) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(config, vocab, model)?;
    let tmp = path.with_extension("partial");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        ImnError::io(path, e)
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| ImnError::io(path, e))?;
    from_bytes(&bytes)
}

//! Checkpoint container: magic, format version, a JSON header (model
//! config, vocabulary, parameter names and shapes) and the parameters as
//! little-endian f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{EncoderModel, ModelConfig};

pub const MAGIC: &[u8; 8] = b"SWTXCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocabulary,
    params: Vec<(String, Vec<usize>)>,
}

pub fn to_bytes(model: &EncoderModel, vocab: &Vocabulary) -> Vec<u8> {
    let header = Header {
        config: model.config.clone(),
        vocab: vocab.clone(),
        params: model
            .store
            .iter()
            .map(|(_, name, t)| (name.to_string(), t.shape().to_vec()))
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(24 + json.len() + model.store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in model.store.iter() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(EncoderModel, Vocabulary)> {
    let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    if header.vocab.len() != header.config.vocab_size {
        return Err(Error::Compatibility(format!(
            "checkpoint vocabulary has {} entries but model expects {}",
            header.vocab.len(),
            header.config.vocab_size
        )));
    }
    let mut model = EncoderModel::new(header.config)?;
    if header.params.len() != model.store.len() {
        return Err(bad("parameter list does not match the configuration"));
    }
    let mut off = 20 + hlen;
    let ids: Vec<_> = model.store.ids().collect();
    for (id, (name, shape)) in ids.into_iter().zip(&header.params) {
        let t = model.store.get_mut(id);
        if t.shape() != shape.as_slice() {
            return Err(bad(&format!("parameter {name} has shape {shape:?}, expected {:?}", t.shape())));
        }
        for x in t.data_mut() {
            let chunk = bytes.get(off..off + 8).ok_or_else(|| bad("truncated parameter data"))?;
            *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            off += 8;
        }
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((model, header.vocab))
}

pub fn save(path: &Path, model: &EncoderModel, vocab: &Vocabulary) -> Result<()> {
    std::fs::write(path, to_bytes(model, vocab)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(EncoderModel, Vocabulary)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Hex SHA-256 of the serialised checkpoint.
pub fn digest(model: &EncoderModel, vocab: &Vocabulary) -> String {
    crate::digest_bytes(&to_bytes(model, vocab))
}

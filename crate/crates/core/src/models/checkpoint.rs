//! Checkpoint container.
//!
//! Layout: the 8-byte magic `SALAUDCK`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every parameter buffer as little-endian `f64` in
//! header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, Model, ModelConfig, ParamRole};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SALAUDCK";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    layers: Vec<LayerEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vocab>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    role: ParamRole,
    shape: Vec<usize>,
}

pub fn write_checkpoint(model: &Model, vocab: Option<&Vocab>) -> Result<Vec<u8>> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        layers: model
            .layers()
            .iter()
            .map(|l| LayerEntry {
                name: l.name.clone(),
                params: l
                    .params
                    .iter()
                    .map(|p| ParamEntry {
                        name: p.name.clone(),
                        role: p.role,
                        shape: p.tensor.shape().to_vec(),
                    })
                    .collect(),
            })
            .collect(),
        vocab: vocab.cloned(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(Model, Option<Vocab>)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Format("checkpoint header truncated".into()))?;
    let header: Header = serde_json::from_slice(json)?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    let mut model = build_model(&header.config)?;
    let expected: Vec<(&str, &[usize])> = model.params().map(|p| (p.name.as_str(), p.tensor.shape())).collect();
    let stored: Vec<&ParamEntry> = header.layers.iter().flat_map(|l| &l.params).collect();
    if stored.len() != expected.len()
        || stored
            .iter()
            .zip(&expected)
            .any(|(s, (n, sh))| s.name != *n || s.shape.as_slice() != *sh)
    {
        return Err(Error::Format("checkpoint layout does not match its config".into()));
    }
    let mut offset = 16 + len;
    let mut values = Vec::with_capacity(stored.len());
    for entry in &stored {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| Error::Format(format!("buffer for `{}` truncated", entry.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        values.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(Error::Format("trailing bytes after parameter buffers".into()));
    }
    model.set_params(&values.into_iter().collect())?;
    Ok((model, header.vocab))
}

pub fn save_checkpoint(path: &Path, model: &Model, vocab: Option<&Vocab>) -> Result<()> {
    fs::write(path, write_checkpoint(model, vocab)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<Vocab>)> {
    read_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let m = build_model(&ModelConfig::text(40, 2, 5)).unwrap();
        let m = m.xavier_reinit("pooler", 99).unwrap();
        let vocab = Vocab::from_words(["a", "b"], 16);
        let bytes = write_checkpoint(&m, Some(&vocab)).unwrap();
        let (back, v) = read_checkpoint(&bytes).unwrap();
        assert_eq!(back.layers(), m.layers());
        assert_eq!(back.config(), m.config());
        assert_eq!(v, Some(vocab));
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(read_checkpoint(b"nonsense").is_err());
    }
}

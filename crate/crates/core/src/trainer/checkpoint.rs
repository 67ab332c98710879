//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "MRCCKPT\0"
//! version  u32 LE
//! hlen     u32 LE   length of the JSON header
//! header   hlen bytes
//! payload  f64 LE values, tensors back to back at manifest offsets
//! digest   32 bytes SHA-256 of everything before it
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Head, Model, Progress, Variant};
use crate::autodiff::{ParamStore, Tensor};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::tokenizer::Vocab;

pub const MAGIC: &[u8; 8] = b"MRCCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub encoder: EncoderConfig,
    pub variant: Variant,
    pub head_shapes: BTreeMap<String, Vec<usize>>,
    pub progress: Progress,
    pub vocab: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut offset = 0u64;
    for p in model.store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += 8 * p.value.len() as u64;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        encoder: model.encoder.config.clone(),
        variant: model.variant(),
        head_shapes: model
            .store
            .iter()
            .filter(|p| p.name.starts_with("head."))
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect(),
        progress: model.progress,
        vocab: model.vocab.tokens().to_vec(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Input(format!("checkpoint header: {e}")))?;
    let hlen = u32::try_from(json.len()).map_err(|_| Error::Input("checkpoint header too large".into()))?;

    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + offset as usize + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&hlen.to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let fail = |m: String| Error::Load(m);
    if bytes.len() < PREFIX_LEN + DIGEST_LEN {
        return Err(fail(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(fail(format!("unsupported format version {version}, expected {FORMAT_VERSION}")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(fail("checksum mismatch (truncated or corrupted file)".into()));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let header_end = PREFIX_LEN
        .checked_add(hlen)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| fail("header length exceeds file".into()))?;
    let header: Header = serde_json::from_slice(&body[PREFIX_LEN..header_end]).map_err(|e| fail(format!("bad header: {e}")))?;
    let payload = &body[header_end..];

    let mut store = ParamStore::new();
    let mut expected = 0u64;
    for t in &header.tensors {
        if t.offset != expected {
            return Err(fail(format!("tensor {} at offset {} overlaps or leaves a gap (expected {expected})", t.name, t.offset)));
        }
        let n: usize = t.shape.iter().product();
        let end = expected + 8 * n as u64;
        if end > payload.len() as u64 {
            return Err(fail(format!("tensor {} runs past the payload", t.name)));
        }
        let data = payload[expected as usize..end as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(t.name.clone(), Tensor::new(t.shape.clone(), data)?);
        expected = end;
    }
    if expected != payload.len() as u64 {
        return Err(fail(format!("payload has {} bytes, manifest covers {expected}", payload.len())));
    }
    let vocab = Vocab::from_token_list(header.vocab).map_err(|e| fail(e.to_string()))?;
    if vocab.size() != header.encoder.vocab_size {
        return Err(fail(format!(
            "vocabulary has {} tokens, encoder expects {}",
            vocab.size(),
            header.encoder.vocab_size
        )));
    }
    let encoder = Encoder::bind(header.encoder, &store)?;
    let head = Head::bind(header.variant, &store)?;
    Ok(Model {
        encoder,
        head,
        store,
        vocab,
        progress: header.progress,
    })
}

/// Writes through a temporary file and renames it into place.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

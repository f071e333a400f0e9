//! Versioned checkpoint files: every tensor as little-endian f64 bytes in
//! base64, the frozen set, free-form metadata, and a sha256 digest checked
//! on load.

use crate::error::{AkvsrError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const VERSION: &str = "akvsr-ckpt/1";

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    dtype: String,
    data: String,
}

/// Digest covers everything in here; BTreeMap keys keep the serialized
/// form canonical.
#[derive(Serialize, Deserialize)]
struct Body {
    version: String,
    meta: BTreeMap<String, String>,
    frozen: Vec<String>,
    tensors: BTreeMap<String, TensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    #[serde(flatten)]
    body: Body,
    digest: String,
}

fn encode_tensor(t: &Tensor) -> TensorRecord {
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    TensorRecord {
        shape: t.shape().to_vec(),
        dtype: "f64".to_string(),
        data: B64.encode(bytes),
    }
}

fn decode_tensor(name: &str, rec: &TensorRecord) -> Result<Tensor> {
    if rec.dtype != "f64" {
        return Err(AkvsrError::Integrity(format!(
            "tensor {name:?} has unsupported dtype {:?}",
            rec.dtype
        )));
    }
    let bytes = B64
        .decode(&rec.data)
        .map_err(|e| AkvsrError::Integrity(format!("tensor {name:?}: bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(AkvsrError::Integrity(format!(
            "tensor {name:?}: payload is {} bytes, not a multiple of 8",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let expect: usize = rec.shape.iter().product();
    if data.len() != expect {
        return Err(AkvsrError::Integrity(format!(
            "tensor {name:?}: shape {:?} wants {expect} values, payload has {}",
            rec.shape,
            data.len()
        )));
    }
    Tensor::new(rec.shape.clone(), data)
}

fn digest_of(body: &Body) -> Result<String> {
    let canonical = serde_json::to_string(body)?;
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn save(path: &Path, store: &ParamStore, meta: &BTreeMap<String, String>) -> Result<()> {
    let tensors = store
        .tensors()
        .iter()
        .map(|(name, t)| (name.clone(), encode_tensor(t)))
        .collect();
    let frozen = store
        .names()
        .filter(|n| store.is_frozen(n))
        .map(|n| n.to_string())
        .collect();
    let body = Body {
        version: VERSION.to_string(),
        meta: meta.clone(),
        frozen,
        tensors,
    };
    let digest = digest_of(&body)?;
    let file = CheckpointFile { body, digest };
    let text = serde_json::to_string(&file)?;
    std::fs::write(path, text).map_err(|e| AkvsrError::File {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load(path: &Path) -> Result<(ParamStore, BTreeMap<String, String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| AkvsrError::File {
        path: path.display().to_string(),
        source: e,
    })?;
    // a truncated or corrupt file is an integrity failure, not a parse bug
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| AkvsrError::Integrity(format!("unreadable checkpoint: {e}")))?;
    if file.body.version != VERSION {
        return Err(AkvsrError::Version {
            found: file.body.version,
            expected: VERSION.to_string(),
        });
    }
    let expect = digest_of(&file.body)?;
    if expect != file.digest {
        return Err(AkvsrError::Integrity(format!(
            "digest mismatch: stored {}, computed {expect}",
            file.digest
        )));
    }
    let mut store = ParamStore::new();
    for (name, rec) in &file.body.tensors {
        store.insert(name.clone(), decode_tensor(name, rec)?);
    }
    for name in &file.body.frozen {
        store.freeze(name)?;
    }
    Ok((store, file.body.meta))
}

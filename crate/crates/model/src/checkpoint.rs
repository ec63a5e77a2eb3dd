//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `CBFFCKPT`, a little-endian `u64` header length,
//! a JSON header, then every parameter followed by every buffer as raw
//! little-endian values in header order. The header carries the format
//! version, a hash of the architecture config, the element type, the name
//! and shape of each tensor, and a SHA-256 of the payload.

use std::fs;
use std::path::Path;

use cbff_core::{Real, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ModelError, Result};
use crate::network::NetConfig;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"CBFFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config_hash: String,
    pub params: Vec<TensorEntry>,
    pub buffers: Vec<TensorEntry>,
    pub payload_sha256: String,
    /// Free-form run metadata (epoch, metric values).
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the architecture-shaping configuration.
pub fn config_hash(cfg: &NetConfig) -> String {
    let canonical = serde_json::json!({
        "encoder_widths": cfg.encoder_widths,
        "encoder_depths": cfg.encoder_depths,
        "decoder_width": cfg.decoder_width,
        "decoder": cfg.decoder,
        "attention_heads": cfg.attention_heads,
        "mlp_ratio": cfg.mlp_ratio,
    });
    hex(&Sha256::digest(canonical.to_string().as_bytes()))
}

pub fn to_bytes<T: Real>(store: &ParamStore<T>, cfg: &NetConfig, meta: serde_json::Value) -> Vec<u8> {
    let entry = |name: &str, t: &Tensor<T>| TensorEntry {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        dtype: T::DTYPE.to_string(),
    };
    let mut payload = Vec::new();
    for t in store.params.iter().map(|p| &p.value).chain(store.buffers.iter().map(|b| &b.value)) {
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config_hash: config_hash(cfg),
        params: store.params.iter().map(|p| entry(&p.name, &p.value)).collect(),
        buffers: store.buffers.iter().map(|b| entry(&b.name, &b.value)).collect(),
        payload_sha256: hex(&Sha256::digest(&payload)),
        meta,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn save<T: Real>(path: &Path, store: &ParamStore<T>, cfg: &NetConfig, meta: serde_json::Value) -> Result<()> {
    fs::write(path, to_bytes(store, cfg, meta))?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {}", header.format_version)));
    }
    Ok((header, &bytes[end..]))
}

/// Load values into `store`, whose layout must match the checkpoint exactly.
pub fn load_into<T: Real>(bytes: &[u8], store: &mut ParamStore<T>, cfg: &NetConfig) -> Result<Header> {
    let (header, payload) = read_header(bytes)?;
    if header.config_hash != config_hash(cfg) {
        return Err(corrupt("checkpoint was written for a different architecture"));
    }
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(corrupt("payload checksum mismatch"));
    }
    if header.params.len() != store.params.len() || header.buffers.len() != store.buffers.len() {
        return Err(corrupt("tensor count mismatch"));
    }
    let targets = store
        .params
        .iter_mut()
        .map(|p| (&p.name, &mut p.value))
        .chain(store.buffers.iter_mut().map(|b| (&b.name, &mut b.value)));
    let mut offset = 0usize;
    for ((name, value), entry) in targets.zip(header.params.iter().chain(&header.buffers)) {
        if *name != entry.name || value.shape() != entry.shape.as_slice() {
            return Err(corrupt(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                entry.name,
                entry.shape,
                name,
                value.shape()
            )));
        }
        let width = match entry.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(corrupt(format!("unknown dtype {other}"))),
        };
        let n = value.numel();
        let chunk = payload
            .get(offset..offset + n * width)
            .ok_or_else(|| corrupt("truncated payload"))?;
        for (dst, src) in value.data_mut().iter_mut().zip(chunk.chunks_exact(width)) {
            *dst = if width == 4 {
                T::from_f64_lossy(f32::read_le(src) as f64)
            } else {
                T::from_f64_lossy(f64::read_le(src))
            };
        }
        offset += n * width;
    }
    if offset != payload.len() {
        return Err(corrupt("trailing bytes after payload"));
    }
    Ok(header)
}

pub fn load<T: Real>(path: &Path, store: &mut ParamStore<T>, cfg: &NetConfig) -> Result<Header> {
    let bytes = fs::read(path)?;
    load_into(&bytes, store, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ChangeNet;
    use cbff_core::TrainConfig;

    #[test]
    fn header_is_readable_without_a_store() {
        let cfg = NetConfig::from(&TrainConfig::toy());
        let (_, store) = ChangeNet::new::<f32>(&cfg, 0);
        let bytes = to_bytes(&store, &cfg, serde_json::json!({"epoch": 1}));
        let (header, payload) = read_header(&bytes).unwrap();
        assert_eq!(header.format_version, FORMAT_VERSION);
        assert_eq!(header.params.len(), store.params.len());
        assert_eq!(payload.len(), 4 * (store.param_count() + store.buffers.iter().map(|b| b.value.numel()).sum::<usize>()));
        assert!(header.params.iter().all(|e| e.dtype == "f32"));
    }

    #[test]
    fn hex_is_lowercase_and_padded() {
        assert_eq!(hex(&[0, 10, 255]), "000aff");
    }
}

//! `DFXCKPT1` parameter container.
//!
//! Layout: the 8-byte magic `DFXCKPT1`, a little-endian `u32` header length,
//! a UTF-8 JSON header, then the little-endian `f32` payload of every
//! parameter in header order. The header carries the SHA-256 of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{NnError, ParamSet, Parameter, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DFXCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    params: Vec<Entry>,
    payload_sha256: String,
}

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

pub fn checkpoint_bytes(params: &ParamSet) -> Vec<u8> {
    let payload = params.payload_bytes();
    let header = Header {
        params: params
            .iter()
            .map(|p| Entry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                frozen: p.is_frozen(),
            })
            .collect(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<ParamSet, NnError> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing DFXCKPT1 magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_end = 12 + hlen;
    if bytes.len() < header_end {
        return Err(bad("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&bytes[12..header_end]).map_err(|e| bad(e.to_string()))?;
    let payload = &bytes[header_end..];
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(bad("payload digest mismatch"));
    }
    let expected: usize = header
        .params
        .iter()
        .map(|e| e.shape.iter().product::<usize>() * 4)
        .sum();
    if expected != payload.len() {
        return Err(bad(format!(
            "payload has {} bytes, header describes {expected}",
            payload.len()
        )));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))));
    let mut set = ParamSet::new();
    for e in header.params {
        let n = e.shape.iter().product();
        let data: Vec<f64> = floats.by_ref().take(n).collect();
        let mut p = Parameter::new(e.name, Tensor::new(e.shape, data)?);
        p.set_frozen(e.frozen);
        set.push(p);
    }
    Ok(set)
}

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<(), NnError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, checkpoint_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet, NnError> {
    parse_checkpoint(&fs::read(path)?)
}

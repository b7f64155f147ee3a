//! Weight snapshots: a JSON header followed by little-endian `f64` values.
//!
//! Layout: `PBWT`, `u32` version, `u64` header length, header JSON, payload.
//! The header carries the architecture, activation bindings, tensor names
//! and shapes, and the SHA-256 of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ActBinding, Arch, Model, ParamEntry, ParamStore, Role};
use crate::error::{Error, Result};
use crate::persist;

const MAGIC: &[u8; 4] = b"PBWT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub arch: Arch,
    pub acts: Vec<ActBinding>,
    pub tensors: Vec<TensorInfo>,
    pub payload_sha256: String,
    /// Content hash of the parameter store, as used for solution weights.
    pub weights: String,
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    for e in &model.params().entries {
        for v in &e.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = SnapshotHeader {
        arch: model.arch().clone(),
        acts: model.acts().to_vec(),
        tensors: model.params().entries.iter().map(|e| TensorInfo { name: e.name.clone(), shape: e.shape.clone(), role: e.role }).collect(),
        payload_sha256: persist::sha256_hex(&payload),
        weights: model.params().content_hash(),
    };
    let h = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + h.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let bad = |m: &str| Error::Integrity(format!("weight snapshot: {m}"));
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    if u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) != VERSION {
        return Err(bad("unsupported version"));
    }
    let hl = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hl).ok_or_else(|| bad("truncated header"))?;
    let header: SnapshotHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let payload = &bytes[16 + hl..];
    if persist::sha256_hex(payload) != header.payload_sha256 {
        return Err(bad("payload checksum mismatch"));
    }
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != 8 * total {
        return Err(bad("payload size disagrees with tensor shapes"));
    }
    let mut off = 0;
    let mut params = ParamStore::default();
    for t in header.tensors {
        let n: usize = t.shape.iter().product();
        let data = payload[off..off + 8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        off += 8 * n;
        params.entries.push(ParamEntry { name: t.name, shape: t.shape, role: t.role, data });
    }
    if params.content_hash() != header.weights {
        return Err(bad("weight hash mismatch"));
    }
    Model::from_parts(header.arch, params, header.acts)
}

pub fn save(model: &Model, path: &Path) -> Result<String> {
    persist::atomic_write(path, &encode(model)?)?;
    Ok(model.params().content_hash())
}

pub fn load(path: &Path) -> Result<Model> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evorelu::EvoReluSpec;

    #[test]
    fn round_trip_and_corruption() {
        let t = Model::new(Arch::desk_resnet(), 2).unwrap();
        let quad = ActBinding::Evo { spec: EvoReluSpec::quadratic(vec![1, 0, 0, 0, 0, 0], 0.3, 1).unwrap() };
        let mut acts = vec![ActBinding::Relu; 8];
        acts[3] = quad;
        let m = t.rebind(acts).unwrap();
        let bytes = encode(&m).unwrap();
        assert_eq!(decode(&bytes).unwrap(), m);
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x40;
        assert!(matches!(decode(&flipped), Err(Error::Integrity(_))));
        assert!(matches!(decode(&bytes[..20]), Err(Error::Integrity(_))));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        assert_eq!(save(&m, &p).unwrap(), m.params().content_hash());
        assert_eq!(load(&p).unwrap(), m);
    }
}

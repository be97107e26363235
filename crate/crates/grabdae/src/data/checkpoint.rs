//! Binary checkpoints: 4-byte magic, u32 version, u32 manifest length,
//! manifest JSON, then a contiguous little-endian f32 payload.
//!
//! The manifest lists every parameter's name, shape and byte offset, plus a
//! caller-supplied `meta` value (model configuration, class names). The
//! round trip is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

const MAGIC: &[u8; 4] = b"GDCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug)]
pub struct CheckpointData {
    pub meta: serde_json::Value,
    pub params: Vec<(String, Tensor)>,
}

impl CheckpointData {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn save_checkpoint(
    path: &Path,
    meta: &serde_json::Value,
    params: &[(&str, &Tensor)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0usize;
    for (name, t) in params {
        entries.push(ParamEntry { name: name.to_string(), shape: t.shape().to_vec(), offset });
        offset += t.len() * 4;
    }
    let manifest = serde_json::to_vec(&Manifest { meta: meta.clone(), params: entries })
        .map_err(|e| Error::Checkpoint(format!("manifest serialization failed: {e}")))?;

    let mut out = Vec::with_capacity(12 + manifest.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, t) in params {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(Error::Checkpoint(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file has {version}, expected {VERSION}"
        )));
    }
    let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 12 + manifest_len {
        return Err(Error::Checkpoint("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[12..12 + manifest_len])
        .map_err(|e| Error::Checkpoint(format!("manifest parse failed: {e}")))?;

    let payload = &bytes[12 + manifest_len..];
    let expected: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>() * 4).sum();
    if payload.len() != expected {
        return Err(Error::Checkpoint(format!(
            "payload length mismatch: {} bytes for {expected} declared",
            payload.len()
        )));
    }

    let mut params = Vec::with_capacity(manifest.params.len());
    let mut expect_offset = 0usize;
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        if entry.offset != expect_offset {
            return Err(Error::Checkpoint(format!(
                "parameter {} declares offset {}, expected {expect_offset}",
                entry.name, entry.offset
            )));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let at = entry.offset + i * 4;
            data.push(f32::from_le_bytes(payload[at..at + 4].try_into().expect("4 bytes")));
        }
        params.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
        expect_offset += n * 4;
    }
    Ok(CheckpointData { meta: manifest.meta, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample_params() -> Vec<(String, Tensor)> {
        vec![
            ("w".to_string(), Tensor::new(vec![2, 2], vec![1.0, -0.5, f32::MIN_POSITIVE, 3.25]).unwrap()),
            ("b".to_string(), Tensor::new(vec![2], vec![0.0, -0.0]).unwrap()),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("model.ckpt");
        let params = sample_params();
        let refs: Vec<(&str, &Tensor)> = params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        save_checkpoint(&path, &json!({"k": 3}), &refs).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta, json!({"k": 3}));
        for (name, t) in &params {
            let lt = loaded.tensor(name).unwrap();
            assert_eq!(lt.shape(), t.shape());
            for (a, b) in lt.data().iter().zip(t.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn truncated_payload_is_length_error() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("model.ckpt");
        let params = sample_params();
        let refs: Vec<(&str, &Tensor)> = params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        save_checkpoint(&path, &json!(null), &refs).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("length mismatch"), "{msg}"),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("model.ckpt");
        let params = sample_params();
        let refs: Vec<(&str, &Tensor)> = params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        save_checkpoint(&path, &json!(null), &refs).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 99;
        fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("version mismatch"), "{msg}"),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }
}

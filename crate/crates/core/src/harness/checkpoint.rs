//! Directory checkpoints: `manifest.json` plus one little-endian blob file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{AlamError, Result};
use crate::nn::Precision;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "blobs.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobEntry {
    pub name: String,
    pub dtype: Precision,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub kind: String,
    pub step: u64,
    pub config: Value,
    pub blobs: Vec<BlobEntry>,
    pub optimizer_step: u64,
    pub rng: Option<Value>,
    pub extra: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// In-memory checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub step: u64,
    pub config: Value,
    pub dtype: Precision,
    pub blobs: Vec<NamedBlob>,
    pub optimizer_step: u64,
    pub rng: Option<Value>,
    pub extra: Value,
}

impl Checkpoint {
    pub fn blob(&self, name: &str) -> Option<&NamedBlob> {
        self.blobs.iter().find(|b| b.name == name)
    }
}

fn encode(data: &[f64], dtype: Precision) -> Vec<u8> {
    match dtype {
        Precision::F32 => data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
        Precision::F64 => data.iter().flat_map(|&v| v.to_le_bytes()).collect(),
    }
}

fn decode(bytes: &[u8], dtype: Precision) -> Vec<f64> {
    match dtype {
        Precision::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
        Precision::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
    }
}

fn temp_sibling(dir: &Path) -> Result<PathBuf> {
    let name = dir.file_name().ok_or_else(|| AlamError::invalid(format!("bad checkpoint path {}", dir.display())))?;
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    Ok(parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id())))
}

/// Writes the checkpoint into a temporary sibling directory and renames it
/// over `dir`, replacing any previous checkpoint there.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<CheckpointManifest> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(ckpt.blobs.len());
    for b in &ckpt.blobs {
        let n: usize = b.shape.iter().product();
        if n != b.data.len() {
            return Err(AlamError::invalid(format!("blob `{}` has {} values for shape {:?}", b.name, b.data.len(), b.shape)));
        }
        let bytes = encode(&b.data, ckpt.dtype);
        entries.push(BlobEntry {
            name: b.name.clone(),
            dtype: ckpt.dtype,
            shape: b.shape.clone(),
            offset: payload.len() as u64,
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        payload.extend(bytes);
    }
    let manifest = CheckpointManifest {
        schema_version: SCHEMA_VERSION,
        kind: ckpt.kind.clone(),
        step: ckpt.step,
        config: ckpt.config.clone(),
        blobs: entries,
        optimizer_step: ckpt.optimizer_step,
        rng: ckpt.rng.clone(),
        extra: ckpt.extra.clone(),
    };
    let tmp = temp_sibling(dir)?;
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    if let Some(parent) = tmp.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::create_dir(&tmp)?;
    let mut f = fs::File::create(tmp.join(BLOB_FILE))?;
    f.write_all(&payload)?;
    f.sync_all()?;
    let mut f = fs::File::create(tmp.join(MANIFEST_FILE))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    f.write_all(b"\n")?;
    f.sync_all()?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let m: CheckpointManifest = serde_json::from_str(&text)?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(AlamError::invalid(format!("unsupported checkpoint schema {}", m.schema_version)));
    }
    Ok(m)
}

/// Loads and verifies every blob against its checksum.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let m = read_manifest(dir)?;
    let payload = fs::read(dir.join(BLOB_FILE))?;
    let mut blobs = Vec::with_capacity(m.blobs.len());
    let mut dtype = None;
    for e in &m.blobs {
        let corrupt = |reason: String| AlamError::CorruptBlob { blob: e.name.clone(), reason };
        let end = e.offset.checked_add(e.bytes).ok_or_else(|| corrupt("offset overflow".into()))?;
        if end as usize > payload.len() {
            return Err(corrupt(format!("needs bytes {}..{end} but the blob file has {}", e.offset, payload.len())));
        }
        let bytes = &payload[e.offset as usize..end as usize];
        if hex::encode(Sha256::digest(bytes)) != e.sha256 {
            return Err(corrupt("checksum mismatch".into()));
        }
        let data = decode(bytes, e.dtype);
        if data.len() != e.shape.iter().product::<usize>() {
            return Err(corrupt(format!("{} values for shape {:?}", data.len(), e.shape)));
        }
        if *dtype.get_or_insert(e.dtype) != e.dtype {
            return Err(corrupt("mixed blob precisions".into()));
        }
        blobs.push(NamedBlob { name: e.name.clone(), shape: e.shape.clone(), data });
    }
    Ok(Checkpoint {
        kind: m.kind,
        step: m.step,
        config: m.config,
        dtype: dtype.unwrap_or_default(),
        blobs,
        optimizer_step: m.optimizer_step,
        rng: m.rng,
        extra: m.extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dtype: Precision) -> Checkpoint {
        Checkpoint {
            kind: "test".into(),
            step: 17,
            config: serde_json::json!({"seed": 3}),
            dtype,
            blobs: vec![
                NamedBlob { name: "w".into(), shape: vec![2, 2], data: vec![0.5, -1.25, 3.0, 1e-3] },
                NamedBlob { name: "b".into(), shape: vec![3], data: vec![0.0, 1.0, 2.0] },
            ],
            optimizer_step: 17,
            rng: Some(serde_json::json!([1, 2])),
            extra: serde_json::json!({}),
        }
    }

    #[test]
    fn save_load_save_is_byte_stable() {
        let tmp = tempfile::tempdir().unwrap();
        for dtype in [Precision::F32, Precision::F64] {
            let a = tmp.path().join("a");
            let b = tmp.path().join("b");
            let ck = sample(dtype);
            let m1 = save_checkpoint(&ck, &a).unwrap();
            let loaded = load_checkpoint(&a).unwrap();
            if dtype == Precision::F64 {
                assert_eq!(loaded, ck);
            }
            let m2 = save_checkpoint(&loaded, &b).unwrap();
            assert_eq!(m1, m2);
            for f in [MANIFEST_FILE, BLOB_FILE] {
                assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
            }
        }
    }

    #[test]
    fn truncated_blob_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ck");
        save_checkpoint(&sample(Precision::F64), &dir).unwrap();
        let p = dir.join(BLOB_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        match load_checkpoint(&dir) {
            Err(AlamError::CorruptBlob { blob, .. }) => assert_eq!(blob, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ck");
        save_checkpoint(&sample(Precision::F64), &dir).unwrap();
        let p = dir.join(BLOB_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes[3] ^= 0xff;
        fs::write(&p, bytes).unwrap();
        match load_checkpoint(&dir) {
            Err(AlamError::CorruptBlob { blob, reason }) => assert_eq!((blob.as_str(), reason.as_str()), ("w", "checksum mismatch")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overwrite_replaces_atomically() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ck");
        save_checkpoint(&sample(Precision::F64), &dir).unwrap();
        let mut ck = sample(Precision::F64);
        ck.step = 18;
        save_checkpoint(&ck, &dir).unwrap();
        assert_eq!(load_checkpoint(&dir).unwrap().step, 18);
        let leftovers: Vec<_> = fs::read_dir(tmp.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }
}

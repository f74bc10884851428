//! Named-tensor dump: `<stem>.json` manifest plus `<stem>.bin` blob of
//! little-endian `f64` values concatenated in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::Tensor;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {source}")]
    Manifest {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: checksum mismatch (blob truncated or modified)")]
    Checksum { path: PathBuf },
    #[error("{path}: manifest describes {expected} bytes, blob has {actual}")]
    Length {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("{path}: tensor `{name}` has unsupported dtype `{dtype}`")]
    Dtype {
        path: PathBuf,
        name: String,
        dtype: String,
    },
    #[error("{path}: tensor `{name}` has invalid shape {shape:?}")]
    Shape {
        path: PathBuf,
        name: String,
        shape: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: u64,
    pub sha256: String,
}

pub fn manifest_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.json"))
}

pub fn blob_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.bin"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DumpError + '_ {
    move |source| DumpError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the tensors and returns the manifest that was written.
pub fn write(dir: &Path, stem: &str, tensors: &[(&str, &Tensor)]) -> Result<DumpManifest, DumpError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        blob.extend_from_slice(&t.to_le_bytes());
        entries.push(TensorEntry {
            name: (*name).to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
        });
    }
    let manifest = DumpManifest {
        tensors: entries,
        blob_bytes: blob.len() as u64,
        sha256: sha256_hex(&blob),
    };
    let bpath = blob_path(dir, stem);
    fs::write(&bpath, &blob).map_err(io_err(&bpath))?;
    let mpath = manifest_path(dir, stem);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, json).map_err(io_err(&mpath))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path, stem: &str) -> Result<DumpManifest, DumpError> {
    let mpath = manifest_path(dir, stem);
    let raw = fs::read(&mpath).map_err(io_err(&mpath))?;
    serde_json::from_slice(&raw).map_err(|source| DumpError::Manifest { path: mpath, source })
}

/// Reads every tensor. The whole blob is verified before any tensor is
/// returned, so a damaged file never yields a partial load.
pub fn read(dir: &Path, stem: &str) -> Result<Vec<(String, Tensor)>, DumpError> {
    let manifest = read_manifest(dir, stem)?;
    let bpath = blob_path(dir, stem);
    let blob = fs::read(&bpath).map_err(io_err(&bpath))?;
    if sha256_hex(&blob) != manifest.sha256 {
        return Err(DumpError::Checksum { path: bpath });
    }
    let expected: u64 = manifest
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>() as u64 * 8)
        .sum();
    if expected != blob.len() as u64 || manifest.blob_bytes != blob.len() as u64 {
        return Err(DumpError::Length {
            path: bpath,
            expected,
            actual: blob.len() as u64,
        });
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    let mut offset = 0usize;
    for e in manifest.tensors {
        if e.dtype != "f64" {
            return Err(DumpError::Dtype {
                path: bpath,
                name: e.name,
                dtype: e.dtype,
            });
        }
        let n: usize = e.shape.iter().product();
        let values: Vec<f64> = blob[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        offset += n * 8;
        let t = Tensor::new(&e.shape, values).map_err(|_| DumpError::Shape {
            path: bpath.clone(),
            name: e.name.clone(),
            shape: e.shape.clone(),
        })?;
        out.push((e.name, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::new(&[2, 2], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]).unwrap();
        let b = Tensor::scalar(7.0);
        write(dir.path(), "t", &[("a", &a), ("b", &b)]).unwrap();
        let back = read(dir.path(), "t").unwrap();
        assert_eq!(back[0].0, "a");
        assert!(back[0].1.bit_eq(&a));
        assert!(back[1].1.bit_eq(&b));

        let bpath = blob_path(dir.path(), "t");
        let mut bytes = fs::read(&bpath).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&bpath, bytes).unwrap();
        assert!(matches!(read(dir.path(), "t"), Err(DumpError::Checksum { .. })));
    }
}

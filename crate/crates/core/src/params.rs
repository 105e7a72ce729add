//! Flat parameter files: little-endian `f32` values in one `.bin` file plus a
//! JSON manifest (`<file>.json`) listing each tensor's name, shape and offset.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: manifest: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("{path}: expected {expected} bytes, found {actual}")]
    Size {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: checksum mismatch")]
    Checksum { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the value file.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Always `f32le`.
    pub format: String,
    /// Hex SHA-256 of the value file.
    pub sha256: String,
    pub tensors: Vec<ManifestEntry>,
}

pub fn manifest_path(bin: &Path) -> PathBuf {
    let mut s = bin.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_params(bin: &Path, named: &[(String, &Tensor)]) -> Result<Manifest, ParamsError> {
    let mut bytes = Vec::new();
    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in named {
        tensors.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: bytes.len() / 4,
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: "f32le".into(),
        sha256: hex(&bytes),
        tensors,
    };
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ParamsError::Io { path, source }
    };
    fs::write(bin, &bytes).map_err(io(bin))?;
    let mpath = manifest_path(bin);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest).expect("plain struct")).map_err(io(&mpath))?;
    Ok(manifest)
}

pub fn load_params(bin: &Path) -> Result<Vec<(String, Tensor)>, ParamsError> {
    let mpath = manifest_path(bin);
    let bad = |msg: String| ParamsError::Manifest {
        path: mpath.clone(),
        msg,
    };
    let text = fs::read_to_string(&mpath).map_err(|source| ParamsError::Io {
        path: mpath.clone(),
        source,
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if manifest.format != "f32le" {
        return Err(bad(format!("unsupported format {:?}", manifest.format)));
    }
    let bytes = fs::read(bin).map_err(|source| ParamsError::Io {
        path: bin.to_path_buf(),
        source,
    })?;
    let mut expected = 0;
    for e in &manifest.tensors {
        if e.offset != expected {
            return Err(bad(format!(
                "{}: offset {} but previous tensors end at {expected}",
                e.name, e.offset
            )));
        }
        expected += e.shape.iter().product::<usize>();
    }
    if bytes.len() != expected * 4 {
        return Err(ParamsError::Size {
            path: bin.to_path_buf(),
            expected: expected * 4,
            actual: bytes.len(),
        });
    }
    if hex(&bytes) != manifest.sha256 {
        return Err(ParamsError::Checksum {
            path: bin.to_path_buf(),
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    manifest
        .tensors
        .into_iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let t = Tensor::new(e.shape, values[e.offset..e.offset + n].to_vec())
                .map_err(|err| bad(format!("{}: {err}", e.name)))?;
            Ok((e.name, t))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("p.bin");
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-8, 7.0]).unwrap();
        let b = Tensor::new(vec![1], vec![f32::MAX]).unwrap();
        save_params(&bin, &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let back = load_params(&bin).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("b".to_string(), b)]);
        assert_eq!(fs::read(&bin).unwrap()[..4], 1.0f32.to_le_bytes());

        let mut bytes = fs::read(&bin).unwrap();
        bytes.pop();
        fs::write(&bin, &bytes).unwrap();
        assert!(matches!(
            load_params(&bin),
            Err(ParamsError::Size {
                expected: 28,
                actual: 27,
                ..
            })
        ));
        bytes.push(0);
        fs::write(&bin, &bytes).unwrap();
        assert!(matches!(load_params(&bin), Err(ParamsError::Checksum { .. })));
    }
}

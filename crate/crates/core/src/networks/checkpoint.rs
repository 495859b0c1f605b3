//! Single-file checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes   "DPENETCK"
//! version    u32 LE
//! header_len u64 LE
//! header     UTF-8 TOML: format_version, dtype, [network], [metadata],
//!            [[tensors]] { name, shape, offset, count }
//! payload    raw little-endian floats; tensor offsets are in bytes from
//!            the start of the payload
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DpeNetParams, NetworkConfig};
use crate::error::{CheckpointError, Error, Result};
use crate::scalar::{DType, Real};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DPENETCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: DType,
    network: NetworkConfig,
    #[serde(default)]
    metadata: toml::Table,
    tensors: Vec<TensorEntry>,
}

/// Everything a checkpoint file holds. `extra` carries auxiliary tensors
/// such as optimizer moments; `metadata` carries free-form run state.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointContents<T> {
    pub config: NetworkConfig,
    pub params: DpeNetParams<T>,
    pub extra: BTreeMap<String, Tensor<T>>,
    pub metadata: toml::Table,
}

pub fn write_checkpoint<T: Real>(path: &Path, contents: &CheckpointContents<T>) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let named = contents
        .params
        .named_tensors()
        .into_iter()
        .chain(contents.extra.iter().map(|(n, t)| (n.clone(), t)));
    for (name, t) in named {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: payload.len(),
            count: t.len(),
        });
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        dtype: T::DTYPE,
        network: contents.config.clone(),
        metadata: contents.metadata.clone(),
        tensors: entries,
    };
    let text = toml::to_string(&header)
        .map_err(|e| CheckpointError::Header(format!("serialize: {e}")))?;

    let mut bytes = Vec::with_capacity(20 + text.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(text.len() as u64).to_le_bytes());
    bytes.extend_from_slice(text.as_bytes());
    bytes.extend_from_slice(&payload);

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write-then-rename so a crash never leaves a truncated checkpoint.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_values<T: Real>(
    payload: &[u8],
    dtype: DType,
    entry: &TensorEntry,
) -> std::result::Result<Vec<T>, CheckpointError> {
    let size = dtype.size_of();
    let end = entry
        .count
        .checked_mul(size)
        .and_then(|n| n.checked_add(entry.offset))
        .filter(|&end| end <= payload.len())
        .ok_or_else(|| {
            CheckpointError::ManifestMismatch(format!(
                "tensor `{}` extends past the end of the payload",
                entry.name
            ))
        })?;
    let bytes = &payload[entry.offset..end];
    Ok(bytes
        .chunks_exact(size)
        .map(|c| match dtype {
            DType::F32 => T::lit(f32::read_le(c) as f64),
            DType::F64 => T::lit(f64::read_le(c)),
        })
        .collect())
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<CheckpointContents<T>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CheckpointError::NotFound(path.to_path_buf()).into())
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(path.to_path_buf()).into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        }
        .into());
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CheckpointError::Header("header length exceeds file size".into()))?;
    let text = std::str::from_utf8(&bytes[20..header_end])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let header: Header =
        toml::from_str(text).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.format_version != version {
        return Err(CheckpointError::Version {
            found: header.format_version,
            expected: CHECKPOINT_VERSION,
        }
        .into());
    }
    header
        .network
        .validate()
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let payload = &bytes[header_end..];

    let mut by_name: BTreeMap<&str, &TensorEntry> = BTreeMap::new();
    for e in &header.tensors {
        if by_name.insert(e.name.as_str(), e).is_some() {
            return Err(CheckpointError::ManifestMismatch(format!(
                "duplicate tensor `{}`",
                e.name
            ))
            .into());
        }
    }

    let mut params = DpeNetParams::<T>::zeros(&header.network);
    for (name, t) in params.named_tensors_mut() {
        let entry = by_name.remove(name.as_str()).ok_or_else(|| {
            CheckpointError::ManifestMismatch(format!("missing tensor `{name}`"))
        })?;
        if entry.shape != t.shape() || entry.count != t.len() {
            return Err(CheckpointError::ManifestMismatch(format!(
                "tensor `{name}` has shape {:?} (count {}) but the network requires {:?}",
                entry.shape,
                entry.count,
                t.shape()
            ))
            .into());
        }
        let values = read_values(payload, header.dtype, entry)?;
        t.data_mut().copy_from_slice(&values);
    }

    let mut extra = BTreeMap::new();
    for (name, entry) in by_name {
        if entry.shape.iter().product::<usize>() != entry.count {
            return Err(CheckpointError::ManifestMismatch(format!(
                "tensor `{name}` shape {:?} disagrees with count {}",
                entry.shape, entry.count
            ))
            .into());
        }
        let values = read_values(payload, header.dtype, entry)?;
        extra.insert(name.to_string(), Tensor::from_vec(&entry.shape, values)?);
    }

    Ok(CheckpointContents {
        config: header.network,
        params,
        extra,
        metadata: header.metadata,
    })
}

pub fn save_checkpoint<T: Real>(
    params: &DpeNetParams<T>,
    config: &NetworkConfig,
    path: &Path,
) -> Result<()> {
    write_checkpoint(
        path,
        &CheckpointContents {
            config: config.clone(),
            params: params.clone(),
            extra: BTreeMap::new(),
            metadata: toml::Table::new(),
        },
    )
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(DpeNetParams<T>, NetworkConfig)> {
    let c = read_checkpoint(path)?;
    Ok((c.params, c.config))
}

/// Loads a checkpoint and fails if it was written for a different network.
pub fn load_checkpoint_expecting<T: Real>(
    path: &Path,
    expected: &NetworkConfig,
) -> Result<DpeNetParams<T>> {
    let (params, config) = load_checkpoint(path)?;
    if &config != expected {
        return Err(CheckpointError::ConfigMismatch(format!(
            "file holds {config:?}, requested {expected:?}"
        ))
        .into());
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::init_params;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tmp();
        let path = dir.path().join("a.ckpt");
        let cfg = NetworkConfig::new(2, 1, 8);
        let p = init_params::<f32>(&cfg, 3);
        save_checkpoint(&p, &cfg, &path).unwrap();
        let (q, c) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(c, cfg);
        for ((_, a), (_, b)) in p.named_tensors().into_iter().zip(q.named_tensors()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn missing_file_is_not_found() {
        let dir = tmp();
        let err = load_checkpoint::<f32>(&dir.path().join("nope.ckpt")).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(CheckpointError::NotFound(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tmp();
        let path = dir.path().join("v.ckpt");
        let cfg = NetworkConfig::new(1, 1, 4);
        save_checkpoint(&init_params::<f32>(&cfg, 0), &cfg, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert!(matches!(
            err,
            Error::Checkpoint(CheckpointError::Version { found: 99, .. })
        ));
    }

    #[test]
    fn bad_magic_is_reported() {
        let dir = tmp();
        let path = dir.path().join("junk.ckpt");
        fs::write(&path, b"definitely not a checkpoint file").unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(CheckpointError::BadMagic(_))));
    }

    #[test]
    fn extra_tensors_and_metadata_survive() {
        let dir = tmp();
        let path = dir.path().join("x.ckpt");
        let cfg = NetworkConfig::new(1, 1, 4);
        let mut extra = BTreeMap::new();
        extra.insert("adam.m.x".to_string(), Tensor::<f64>::full(&[2, 3], 0.5));
        let mut metadata = toml::Table::new();
        metadata.insert("epoch".into(), toml::Value::Integer(4));
        let contents = CheckpointContents {
            config: cfg.clone(),
            params: init_params::<f64>(&cfg, 1),
            extra,
            metadata,
        };
        write_checkpoint(&path, &contents).unwrap();
        assert_eq!(read_checkpoint::<f64>(&path).unwrap(), contents);
    }
}

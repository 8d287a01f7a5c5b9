//! Binary model snapshots.
//!
//! Layout: `b"R2AU"`, format version (`u32` LE), header length (`u64` LE), a
//! UTF-8 JSON header `{"config": .., "tensors": [{name, shape, offset}]}`,
//! then every state tensor as little-endian `f32` in header order. Offsets
//! are byte positions relative to the start of the blob section.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, R2AUNet};
use crate::nn::Module;
use crate::tensor::num_like::Scalar;
use crate::tensor::{Shape, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"R2AU";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes `model` to bytes.
pub fn to_bytes<T: Scalar>(model: &R2AUNet<T>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    model.visit(&mut |p| {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().dims(),
            offset: blob.len() as u64,
        });
        for v in p.value.data() {
            blob.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    });
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len());
    match end {
        Some(e) => {
            let s = &bytes[*at..e];
            *at = e;
            Ok(s)
        }
        None => Err(Error::Checkpoint("file is truncated".into())),
    }
}

/// Reads only the header.
pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    let mut at = 0;
    if take(bytes, &mut at, 4)? != MAGIC {
        return Err(Error::Checkpoint(
            "not a checkpoint (bad magic bytes)".into(),
        ));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (this build reads {VERSION})"
        )));
    }
    let len = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let header: Header = serde_json::from_slice(take(bytes, &mut at, len)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    Ok((header, at))
}

/// Rebuilds a model from bytes produced by [`to_bytes`].
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<R2AUNet<T>> {
    let (header, start) = read_header(bytes)?;
    let blob = &bytes[start..];
    let mut model = R2AUNet::<T>::build(&header.config, 0)
        .map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;
    let mut expected: Vec<(String, Shape)> = Vec::new();
    model.visit(&mut |p| expected.push((p.name.clone(), p.value.shape())));
    if expected.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, file has {}",
            expected.len(),
            header.tensors.len()
        )));
    }
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || shape.dims() != entry.shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` {:?} does not match model tensor `{name}` {shape}",
                entry.name, entry.shape
            )));
        }
        let mut at = usize::try_from(entry.offset)
            .map_err(|_| Error::Checkpoint("offset too large".into()))?;
        let raw = take(blob, &mut at, shape.numel() * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        model.set_param(name, Tensor::from_vec(*shape, data)?)?;
    }
    Ok(model)
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save<T: Scalar>(model: &R2AUNet<T>, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(model)?)
}

pub fn load<T: Scalar>(path: &Path) -> Result<R2AUNet<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

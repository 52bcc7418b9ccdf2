//! Parameter checkpoints: a flat, versioned binary container. Layout:
//!
//! ```text
//! magic "PFCP" | u32 version (LE) | u64 manifest length (LE)
//! manifest JSON (model config, precision, layout hash, tensor index)
//! raw little-endian tensor payload, in manifest order
//! ```
//!
//! Tensors are addressed by name; loading rebuilds the typed parameter
//! structure from the stored config and fills tensors by name, casting
//! between f32 and f64 as needed, so checkpoints are portable across
//! precisions.

use crate::error::{Error, Result};
use crate::featurize::layout_hash;
use crate::model::{init_ar_params, init_params, ArDecoderParams, ModelConfig, ModelParams};
use crate::real::{Precision, Real};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PFCP";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: Precision,
    /// Byte offset into the payload.
    offset: u64,
    /// Payload bytes.
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    precision: Precision,
    model: ModelConfig,
    ar_layers: Option<usize>,
    layout_hash: String,
    tensors: Vec<TensorEntry>,
}

pub fn save<T: Real>(
    path: impl AsRef<Path>,
    params: &ModelParams<T>,
    ar: Option<&ArDecoderParams<T>>,
) -> Result<()> {
    let path = path.as_ref();
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push_set = |names: &[String], tensors: &[crate::tensor::Tensor<T>]| {
        for (name, tensor) in names.iter().zip(tensors) {
            let bytes = T::to_le_bytes_vec(tensor.data());
            entries.push(TensorEntry {
                name: name.clone(),
                shape: tensor.shape().to_vec(),
                dtype: T::DTYPE,
                offset: payload.len() as u64,
                len: bytes.len() as u64,
            });
            payload.extend_from_slice(&bytes);
        }
    };
    push_set(&params.set.names, &params.set.tensors);
    if let Some(dec) = ar {
        push_set(&dec.set.names, &dec.set.tensors);
    }

    let manifest = Manifest {
        format: "pifold-checkpoint".into(),
        version: VERSION,
        precision: T::DTYPE,
        model: params.cfg.clone(),
        ar_layers: ar.map(|d| d.n_layers),
        layout_hash: layout_hash(&params.cfg.features),
        tensors: entries,
    };
    let manifest_json = serde_json::to_vec(&manifest)?;

    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let io = |e| Error::io(path.display().to_string(), e);
    file.write_all(MAGIC).map_err(io)?;
    file.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    file.write_all(&(manifest_json.len() as u64).to_le_bytes()).map_err(io)?;
    file.write_all(&manifest_json).map_err(io)?;
    file.write_all(&payload).map_err(io)?;
    Ok(())
}

fn read_tensor<T: Real>(payload: &[u8], entry: &TensorEntry) -> Result<crate::tensor::Tensor<T>> {
    let start = entry.offset as usize;
    let end = start + entry.len as usize;
    if end > payload.len() {
        return Err(Error::Checkpoint(format!("tensor '{}' out of bounds", entry.name)));
    }
    let bytes = &payload[start..end];
    let tensor = match entry.dtype {
        Precision::F32 => {
            crate::tensor::Tensor::new(entry.shape.clone(), f32::from_le_bytes_vec(bytes))?.cast()
        }
        Precision::F64 => {
            crate::tensor::Tensor::new(entry.shape.clone(), f64::from_le_bytes_vec(bytes))?.cast()
        }
    };
    Ok(tensor)
}

pub fn load<T: Real>(
    path: impl AsRef<Path>,
) -> Result<(ModelParams<T>, Option<ArDecoderParams<T>>)> {
    let path = path.as_ref();
    let mut file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::CheckpointNotFound(path.display().to_string()))
        }
        Err(e) => return Err(Error::io(path.display().to_string(), e)),
    };
    let mut raw = Vec::new();
    file.read_to_end(&mut raw).map_err(|e| Error::io(path.display().to_string(), e))?;
    if raw.len() < 16 || &raw[0..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes([raw[4], raw[5], raw[6], raw[7]]);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(raw[8..16].try_into().unwrap()) as usize;
    if raw.len() < 16 + mlen {
        return Err(Error::Checkpoint("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&raw[16..16 + mlen])?;
    let payload = &raw[16 + mlen..];

    let expected_hash = layout_hash(&manifest.model.features);
    if manifest.layout_hash != expected_hash {
        return Err(Error::Checkpoint(format!(
            "layout hash mismatch: checkpoint {} vs current {}",
            manifest.layout_hash, expected_hash
        )));
    }

    let mut params = init_params::<T>(&manifest.model, 0)?;
    let mut dec = match manifest.ar_layers {
        Some(layers) => Some(init_ar_params::<T>(&manifest.model, layers, 0)?),
        None => None,
    };

    let mut filled = 0usize;
    for entry in &manifest.tensors {
        let tensor = read_tensor::<T>(payload, entry)?;
        let slot = params
            .set
            .names
            .iter()
            .position(|n| n == &entry.name)
            .map(|i| &mut params.set.tensors[i])
            .or_else(|| {
                dec.as_mut().and_then(|d| {
                    d.set
                        .names
                        .iter()
                        .position(|n| n == &entry.name)
                        .map(|i| &mut d.set.tensors[i])
                })
            });
        match slot {
            Some(t) => {
                if t.shape() != tensor.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor '{}': shape {:?} does not match configured {:?}",
                        entry.name,
                        tensor.shape(),
                        t.shape()
                    )));
                }
                *t = tensor;
                filled += 1;
            }
            None => {
                return Err(Error::Checkpoint(format!("unknown tensor '{}'", entry.name)));
            }
        }
    }
    let expected = params.set.len() + dec.as_ref().map_or(0, |d| d.set.len());
    if filled != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {filled} tensors, model wants {expected}"
        )));
    }
    Ok((params, dec))
}

//! Binary tensor container used for model checkpoints, whitening means and
//! feature tables.
//!
//! Layout: 8 magic bytes, a little-endian `u64` manifest length, the JSON
//! manifest, then every tensor as little-endian `f32` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archzoo::{Model, ModelSpec};
use crate::error::{CheckpointError, Error, Result};
use crate::params::ParamKind;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MPATCH\0\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: u64,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: Option<ModelSpec>,
    pub seed: u64,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor<f32>>,
}

impl Container {
    pub fn new(spec: Option<ModelSpec>, seed: u64, meta: serde_json::Value) -> Self {
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                spec,
                seed,
                meta,
                tensors: Vec::new(),
            },
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, kind: ParamKind, t: Tensor<f32>) {
        let offset = self
            .manifest
            .tensors
            .last()
            .zip(self.tensors.last())
            .map(|(e, t)| e.offset + 4 * t.numel() as u64)
            .unwrap_or(0);
        self.manifest.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            kind,
        });
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.manifest
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let data_len: usize = self.tensors.iter().map(|t| 4 * t.numel()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + data_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let truncated = |expected: u64| CheckpointError::Truncated {
            expected,
            actual: bytes.len() as u64,
        };
        if bytes.len() < 16 {
            return Err(if bytes.len() >= 8 && &bytes[..8] != MAGIC {
                CheckpointError::Magic
            } else {
                truncated(16)
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let data_start = 16u64
            .checked_add(mlen)
            .ok_or_else(|| CheckpointError::Manifest("manifest length overflows".into()))?;
        if (bytes.len() as u64) < data_start {
            return Err(truncated(data_start));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[16..data_start as usize])
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let data = &bytes[data_start as usize..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut expected_offset = 0u64;
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset {
                return Err(CheckpointError::Manifest(format!(
                    "tensor `{}` at offset {} (expected {expected_offset})",
                    e.name, e.offset
                )));
            }
            let end = e.offset + 4 * n as u64;
            if end > data.len() as u64 {
                return Err(truncated(data_start + end));
            }
            let vals = data[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Tensor::new(&e.shape, vals).map_err(|e| CheckpointError::Manifest(e.to_string()))?);
            expected_offset = end;
        }
        if expected_offset != data.len() as u64 {
            return Err(CheckpointError::Manifest(format!(
                "{} trailing bytes after the last tensor",
                data.len() as u64 - expected_offset
            )));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

/// Parameters and buffers of `model`, stored as 32-bit floats.
pub fn model_container<T: Scalar>(model: &Model<T>) -> Container {
    let mut c = Container::new(Some(model.spec().clone()), model.spec().init_seed, serde_json::Value::Null);
    for e in model.store().entries() {
        c.push(&e.name, e.kind, e.value.cast());
    }
    c
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    model_container(model).save(path)
}

/// Rebuilds the model from the stored spec and overwrites every tensor.
pub fn model_from_container<T: Scalar>(c: &Container) -> Result<Model<T>> {
    let spec = c.manifest.spec.clone().ok_or(CheckpointError::NoSpec)?;
    let mut model = Model::<T>::build(spec)?;
    let store = model.store_mut();
    for i in 0..store.len() {
        let entry = store.entry_mut(i);
        let t = c
            .get(&entry.name)
            .ok_or_else(|| CheckpointError::Missing(entry.name.clone()))?;
        if t.shape() != entry.value.shape() {
            return Err(CheckpointError::Shape {
                name: entry.name.clone(),
                manifest: t.shape().to_vec(),
                model: entry.value.shape().to_vec(),
            }
            .into());
        }
        entry.value = t.cast();
    }
    Ok(model)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    model_from_container(&Container::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archzoo::ArchKind;

    fn small() -> Container {
        let mut c = Container::new(None, 3, serde_json::json!({"k": 1}));
        c.push("a", ParamKind::Trainable, Tensor::from_f64(&[2, 2], &[1.0, -2.0, 0.5, 3.25]).unwrap());
        c.push("b", ParamKind::Buffer, Tensor::from_f64(&[3], &[7.0, 8.0, 9.0]).unwrap());
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = small();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.manifest.tensors[1].offset, 16);
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = small().to_bytes();
        for cut in [4, 12, 20, bytes.len() - 1] {
            let err = Container::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, CheckpointError::Truncated { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_and_magic_are_checked() {
        let mut c = small();
        c.manifest.format_version = 9;
        assert!(matches!(
            Container::from_bytes(&c.to_bytes()),
            Err(CheckpointError::Version { found: 9, .. })
        ));
        let mut bytes = small().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Container::from_bytes(&bytes), Err(CheckpointError::Magic)));
    }

    #[test]
    fn shape_disagreement_is_rejected() {
        let model = Model::<f32>::build(ModelSpec::new(ArchKind::Mlp, 3, 0)).unwrap();
        let mut c = model_container(&model);
        let i = c.manifest.tensors.iter().position(|e| e.name == "head.bias").unwrap();
        c.manifest.tensors[i].shape = vec![1, 3];
        c.tensors[i] = c.tensors[i].clone().reshape(&[1, 3]).unwrap();
        let err = model_from_container::<f32>(&c).err().unwrap();
        assert!(matches!(err, Error::Checkpoint(CheckpointError::Shape { .. })), "{err}");
    }
}

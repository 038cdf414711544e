//! Checkpoint archive.
//!
//! Layout: the 8-byte magic `HR3DCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` manifest length, the JSON manifest, then the raw
//! little-endian tensor buffers at the manifest's byte offsets (relative to
//! the start of the payload).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::arch::ArchitectureSpec;
use crate::network::params::{ParamRole, ParameterStore};
use crate::tensor::{DType, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"HR3DCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: DType,
    pub architecture: ArchitectureSpec,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    pub tensors: Vec<TensorRecord>,
}

pub fn encode<S: Scalar>(spec: &ArchitectureSpec, store: &ParameterStore<S>) -> Result<Vec<u8>> {
    store.check_against(spec)?;
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for e in store.entries() {
        let offset = payload.len();
        for &v in e.tensor.data() {
            v.write_le(&mut payload);
        }
        tensors.push(TensorRecord {
            name: e.name.clone(),
            role: e.role,
            shape: e.tensor.dims().to_vec(),
            dtype: S::DTYPE,
            offset,
            bytes: payload.len() - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: S::DTYPE,
        architecture: spec.clone(),
        bn_epsilon: store.bn_epsilon,
        bn_momentum: store.bn_momentum,
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode<S: Scalar>(bytes: &[u8], path: &Path) -> Result<(ArchitectureSpec, ParameterStore<S>)> {
    let fmt = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fmt("not a checkpoint archive".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(fmt(format!("unsupported format version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let Some(json) = bytes.get(20..20 + mlen) else {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: 20 + mlen,
            found: bytes.len(),
        });
    };
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| fmt(e.to_string()))?;
    if manifest.dtype != S::DTYPE {
        return Err(fmt(format!("stored as {:?}, requested {:?}", manifest.dtype, S::DTYPE)));
    }
    let payload = &bytes[20 + mlen..];
    let expected: usize = manifest.tensors.iter().map(|t| t.bytes).sum();
    if payload.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: 20 + mlen + expected,
            found: bytes.len(),
        });
    }
    if payload.len() > expected {
        return Err(fmt(format!("{} trailing bytes", payload.len() - expected)));
    }
    let mut store = ParameterStore::new();
    store.bn_epsilon = manifest.bn_epsilon;
    store.bn_momentum = manifest.bn_momentum;
    let size = S::DTYPE.size();
    for rec in &manifest.tensors {
        let n: usize = rec.shape.iter().product();
        if n * size != rec.bytes || rec.offset + rec.bytes > payload.len() {
            return Err(fmt(format!("record {} has inconsistent extent", rec.name)));
        }
        let data = payload[rec.offset..rec.offset + rec.bytes]
            .chunks_exact(size)
            .map(S::read_le)
            .collect();
        let layer = rec
            .name
            .rsplit_once('.')
            .map(|(l, _)| l)
            .ok_or_else(|| fmt(format!("bad tensor name {}", rec.name)))?;
        store.insert(layer, rec.role, Tensor::from_vec(rec.shape.clone(), data)?)?;
    }
    let spec = ArchitectureSpec::new(
        manifest.architecture.in_channels(),
        manifest.architecture.num_classes(),
        manifest.architecture.layers().to_vec(),
    )?;
    store.check_against(&spec)?;
    Ok((spec, store))
}

pub fn save<S: Scalar>(path: impl AsRef<Path>, spec: &ArchitectureSpec, store: &ParameterStore<S>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(spec, store)?).map_err(|e| Error::io(path, e))
}

pub fn load<S: Scalar>(path: impl AsRef<Path>) -> Result<(ArchitectureSpec, ParameterStore<S>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::arch::{ArchConfig, Variant};
    use crate::network::params::init_parameters;
    use crate::rng::Rng;

    fn small() -> (ArchitectureSpec, ParameterStore<f32>) {
        let spec =
            ArchitectureSpec::highres3dnet(&ArchConfig::new(Variant::Dropout, 3).with_widths([2, 3, 4])).unwrap();
        let store = init_parameters(&spec, &mut Rng::new(5)).unwrap();
        (spec, store)
    }

    #[test]
    fn byte_exact_round_trip() {
        let (spec, store) = small();
        let bytes = encode(&spec, &store).unwrap();
        let (spec2, store2) = decode::<f32>(&bytes, Path::new("mem")).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(store2, store);
        assert_eq!(encode(&spec2, &store2).unwrap(), bytes);
    }

    #[test]
    fn corrupt_archives_rejected() {
        let (spec, store) = small();
        let bytes = encode(&spec, &store).unwrap();
        let p = Path::new("mem");
        assert!(matches!(decode::<f32>(&bytes[..bytes.len() - 3], p), Err(Error::Truncated { .. })));
        assert!(matches!(decode::<f32>(&bytes[..30], p), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(decode::<f32>(&bad, p), Err(Error::Format { .. })));
        assert!(matches!(decode::<f64>(&bytes, p), Err(Error::Format { .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode::<f32>(&extra, p).is_err());
    }

    #[test]
    fn store_spec_mismatch_rejected_on_save() {
        let (_, store) = small();
        let other = ArchitectureSpec::highres3dnet(&ArchConfig::new(Variant::Default, 3)).unwrap();
        assert!(encode(&other, &store).is_err());
    }
}

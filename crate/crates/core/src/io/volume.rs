//! Volume files: a magic line, a TOML header, a terminator line, then the
//! little-endian payload.
//!
//! ```text
//! HR3DVOL
//! version = 1
//! dims = [32, 32, 32]
//! channels = 1
//! dtype = "f32"
//! spacing_mm = [1.0, 1.0, 1.0]
//! payload_bytes = 131072
//! END
//! <payload>
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LabelVolume;
use crate::tensor::Tensor;

const MAGIC: &str = "HR3DVOL\n";
const TERMINATOR: &str = "END\n";
pub const VOLUME_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeDType {
    F32,
    U16,
}

impl VolumeDType {
    fn size(self) -> usize {
        match self {
            VolumeDType::F32 => 4,
            VolumeDType::U16 => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub version: u32,
    pub dims: [usize; 3],
    pub channels: usize,
    pub dtype: VolumeDType,
    pub spacing_mm: [f64; 3],
    pub payload_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    /// `(C, D, H, W)` intensities.
    F32(Tensor<f32>),
    /// Single-channel class ids.
    U16(Vec<u16>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub data: VolumeData,
}

impl Volume {
    pub fn image(tensor: Tensor<f32>) -> Result<Self> {
        Ok(Volume {
            dims: tensor.spatial()?,
            spacing_mm: [1.0; 3],
            data: VolumeData::F32(tensor),
        })
    }

    pub fn labels(labels: &LabelVolume) -> Self {
        Volume {
            dims: labels.dims(),
            spacing_mm: [1.0; 3],
            data: VolumeData::U16(labels.labels().to_vec()),
        }
    }

    pub fn header(&self) -> VolumeHeader {
        let (channels, dtype, n) = match &self.data {
            VolumeData::F32(t) => (t.channels(), VolumeDType::F32, t.numel()),
            VolumeData::U16(v) => (1, VolumeDType::U16, v.len()),
        };
        VolumeHeader {
            version: VOLUME_VERSION,
            dims: self.dims,
            channels,
            dtype,
            spacing_mm: self.spacing_mm,
            payload_bytes: n * dtype.size(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = toml::to_string(&self.header()).map_err(|e| Error::invalid(e.to_string()))?;
        let mut out = Vec::with_capacity(64 + header.len() + self.header().payload_bytes);
        out.extend_from_slice(MAGIC.as_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(TERMINATOR.as_bytes());
        match &self.data {
            VolumeData::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            VolumeData::U16(v) => v.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let rest = bytes
            .strip_prefix(MAGIC.as_bytes())
            .ok_or_else(|| fmt("not a volume file".into()))?;
        let marker = format!("\n{TERMINATOR}");
        let end = rest
            .windows(marker.len())
            .position(|w| w == marker.as_bytes())
            .ok_or_else(|| fmt("header terminator missing".into()))?;
        let text = std::str::from_utf8(&rest[..end + 1]).map_err(|e| fmt(e.to_string()))?;
        let header: VolumeHeader = toml::from_str(text).map_err(|e| fmt(e.to_string()))?;
        if header.version != VOLUME_VERSION {
            return Err(fmt(format!("unknown version {}", header.version)));
        }
        if header.dims.contains(&0) || header.channels == 0 {
            return Err(fmt(format!("empty dims {:?}", header.dims)));
        }
        if header.dtype == VolumeDType::U16 && header.channels != 1 {
            return Err(fmt("label volumes have one channel".into()));
        }
        let n = header.channels * header.dims.iter().product::<usize>();
        let size = header.dtype.size();
        if header.payload_bytes != n * size {
            return Err(fmt(format!(
                "header dims {:?} x {} need {} bytes, header declares {}",
                header.dims,
                header.channels,
                n * size,
                header.payload_bytes
            )));
        }
        let start = MAGIC.len() + end + marker.len();
        let payload = &bytes[start..];
        if payload.len() < header.payload_bytes {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected: start + header.payload_bytes,
                found: bytes.len(),
            });
        }
        if payload.len() > header.payload_bytes {
            return Err(fmt(format!("{} trailing bytes", payload.len() - header.payload_bytes)));
        }
        let data = match header.dtype {
            VolumeDType::F32 => {
                let v = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let [d, h, w] = header.dims;
                VolumeData::F32(Tensor::from_vec(vec![header.channels, d, h, w], v)?)
            }
            VolumeDType::U16 => VolumeData::U16(
                payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Volume {
            dims: header.dims,
            spacing_mm: header.spacing_mm,
            data,
        })
    }

    pub fn into_image(self, path: &Path) -> Result<Tensor<f32>> {
        match self.data {
            VolumeData::F32(t) => Ok(t),
            VolumeData::U16(_) => Err(Error::Format {
                path: path.to_path_buf(),
                reason: "expected an f32 image, found u16 labels".into(),
            }),
        }
    }

    pub fn into_labels(self, num_classes: usize, path: &Path) -> Result<LabelVolume> {
        match self.data {
            VolumeData::U16(v) => LabelVolume::new(self.dims, num_classes, v),
            VolumeData::F32(_) => Err(Error::Format {
                path: path.to_path_buf(),
                reason: "expected u16 labels, found an f32 image".into(),
            }),
        }
    }
}

pub fn write_volume(path: impl AsRef<Path>, volume: &Volume) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, volume.encode()?).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Volume::decode(&bytes, path)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    read_volume(path)?.into_image(path)
}

pub fn read_labels(path: impl AsRef<Path>, num_classes: usize) -> Result<LabelVolume> {
    let path = path.as_ref();
    read_volume(path)?.into_labels(num_classes, path)
}

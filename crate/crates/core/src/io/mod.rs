//! File formats: volumes, dataset manifests, synthetic data, run
//! configuration and CSV tables.

pub mod config;
pub mod manifest;
pub mod synthetic;
pub mod volume;

pub use config::RunConfig;
pub use manifest::{load_dataset, DatasetManifest, ManifestEntry};
pub use synthetic::{generate_synthetic, synthesize, synthesize_subject, ShapeKind, SyntheticSpec};
pub use volume::{read_image, read_labels, read_volume, write_volume, Volume, VolumeData, VolumeDType, VolumeHeader};

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Writes `rows` as CSV with a header derived from the row type.
pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

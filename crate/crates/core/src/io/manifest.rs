//! JSON dataset manifest listing image/label volume pairs by split. Paths
//! are relative to the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split, Subject};
use crate::error::{Error, Result};
use crate::io::volume::{read_image, read_labels};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub image: PathBuf,
    pub labels: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Checks class count and that names and files are not shared between
    /// entries.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Dataset(format!("class count {} below 2", self.num_classes)));
        }
        let mut names = HashSet::new();
        let mut files = HashSet::new();
        for e in &self.entries {
            if !names.insert(&e.name) {
                return Err(Error::Dataset(format!("entry {} listed twice", e.name)));
            }
            for f in [&e.image, &e.labels] {
                if !files.insert(f) {
                    return Err(Error::Dataset(format!("{} referenced by two entries", f.display())));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }
}

/// Reads every volume a manifest references.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut ds = Dataset::new(manifest.num_classes);
    for e in &manifest.entries {
        let (ip, lp) = (base.join(&e.image), base.join(&e.labels));
        for p in [&ip, &lp] {
            if !p.exists() {
                return Err(Error::Dataset(format!("{}: {} does not exist", e.name, p.display())));
            }
        }
        let image = read_image(&ip)?;
        let labels = read_labels(&lp, manifest.num_classes)?;
        if image.channels() != 1 || image.spatial()? != labels.dims() {
            return Err(Error::Dataset(format!(
                "{}: image {:?} and labels {:?} disagree",
                e.name,
                image.dims(),
                labels.dims()
            )));
        }
        ds.push(e.split, Subject::new(e.name.clone(), image, labels)?)?;
    }
    Ok(ds)
}

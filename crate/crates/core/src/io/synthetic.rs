//! Synthetic segmentation volumes: nested shapes whose class volumes shrink
//! from the outside in, over a dominant background.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split, Subject};
use crate::error::{Error, Result};
use crate::io::manifest::{DatasetManifest, ManifestEntry};
use crate::io::volume::{write_volume, Volume};
use crate::loss::LabelVolume;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipsoids,
    Boxes,
    /// Ellipsoids or boxes, chosen per volume.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub size: usize,
    pub classes: usize,
    pub shapes: ShapeKind,
    /// Mean intensity of class `c` is `c * contrast`.
    pub contrast: f64,
    pub noise_std: f64,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            size: 32,
            classes: 3,
            shapes: ShapeKind::Ellipsoids,
            contrast: 1.0,
            noise_std: 0.25,
            train: 1,
            validation: 0,
            test: 1,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.size < 16 {
            return Err(Error::invalid(format!(
                "synthetic data needs at least 2 classes and 16^3 voxels (got {}, {})",
                self.classes, self.size
            )));
        }
        // Innermost shell must still hold a voxel: outer radius / (C - 1) >= 1.
        if (self.size as f64 * 0.25) / ((self.classes - 1) as f64) < 1.0 {
            return Err(Error::invalid(format!("{} classes do not fit in {}^3", self.classes, self.size)));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() || !self.contrast.is_finite() {
            return Err(Error::invalid("noise and contrast must be finite and non-negative"));
        }
        Ok(())
    }

    fn splits(&self) -> [(Split, usize); 3] {
        [
            (Split::Train, self.train),
            (Split::Validation, self.validation),
            (Split::Test, self.test),
        ]
    }
}

/// One volume; `index` selects an independent random stream.
pub fn synthesize_subject(spec: &SyntheticSpec, index: u64) -> Result<(Tensor<f32>, LabelVolume)> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed).derive(index);
    let n = spec.size;
    let nf = n as f64;
    let boxes = match spec.shapes {
        ShapeKind::Ellipsoids => false,
        ShapeKind::Boxes => true,
        ShapeKind::Mixed => rng.bernoulli(0.5),
    };
    // Outer radii chosen so the foreground stays well under a fifth of the
    // volume (boxes are shrunk to match the ellipsoid volume).
    let shrink = if boxes { 0.8 } else { 1.0 };
    let radii = [0; 3].map(|_| rng.uniform(0.22, 0.3) * nf * shrink);
    let centre = [0; 3].map(|_| (nf - 1.0) / 2.0 + rng.uniform(-0.06, 0.06) * nf);
    let shells = spec.classes - 1;
    let mut labels = vec![0u16; n * n * n];
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let d = [z, y, x].map(|v| v as f64);
                let norm = (0..3)
                    .map(|a| ((d[a] - centre[a]) / radii[a]).abs())
                    .map(|v| if boxes { v } else { v * v })
                    .fold(0.0, |acc: f64, v| if boxes { acc.max(v) } else { acc + v });
                let r = if boxes { norm } else { norm.sqrt() };
                // Shell k (class k) spans r in ((shells-k)/shells, (shells-k+1)/shells].
                if r <= 1.0 {
                    let k = ((1.0 - r) * shells as f64).floor() as usize + 1;
                    labels[(z * n + y) * n + x] = k.min(shells) as u16;
                }
            }
        }
    }
    // The innermost class always owns the centre voxel.
    let c = centre.map(|v| v.round() as usize);
    labels[(c[0] * n + c[1]) * n + c[2]] = shells as u16;
    let present = {
        let mut seen = vec![false; spec.classes];
        labels.iter().for_each(|&l| seen[l as usize] = true);
        seen
    };
    if let Some(missing) = present.iter().position(|&p| !p) {
        return Err(Error::invalid(format!("class {missing} absent from synthetic volume {index}")));
    }
    let image = labels
        .iter()
        .map(|&l| (l as f64 * spec.contrast + rng.normal(0.0, spec.noise_std)) as f32)
        .collect();
    Ok((
        Tensor::from_vec(vec![1, n, n, n], image)?,
        LabelVolume::new([n; 3], spec.classes, labels)?,
    ))
}

/// The whole dataset in memory, with names `{split}_{index:03}`.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Dataset> {
    let mut ds = Dataset::new(spec.classes);
    let mut index = 0u64;
    for (split, count) in spec.splits() {
        for i in 0..count {
            let (image, labels) = synthesize_subject(spec, index)?;
            let name = format!("{}_{i:03}", split_name(split));
            ds.push(split, Subject::new(name, image, labels)?)?;
            index += 1;
        }
    }
    Ok(ds)
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Validation => "validation",
        Split::Test => "test",
    }
}

/// Writes the dataset's volumes and `manifest.json` into `dir`; returns the
/// manifest path.
pub fn generate_synthetic(spec: &SyntheticSpec, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ds = synthesize(spec)?;
    let mut entries = Vec::new();
    for (split, _) in spec.splits() {
        for s in ds.split(split) {
            let image = PathBuf::from(format!("{}_image.vol", s.name));
            let labels = PathBuf::from(format!("{}_labels.vol", s.name));
            write_volume(dir.join(&image), &Volume::image(s.image.clone())?)?;
            write_volume(dir.join(&labels), &Volume::labels(&s.labels))?;
            entries.push(ManifestEntry {
                name: s.name.clone(),
                image,
                labels,
                split,
            });
        }
    }
    let manifest = DatasetManifest {
        num_classes: spec.classes,
        entries,
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

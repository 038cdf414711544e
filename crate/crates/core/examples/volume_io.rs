//! Writes a synthetic dataset to disk, reads it back and prints a header.

use highres3d::io::{generate_synthetic, load_dataset, read_volume, SyntheticSpec};
use highres3d::Result;

pub fn run_example() -> Result<usize> {
    let dir = std::env::temp_dir().join(format!("highres3d-volume-io-{}", std::process::id()));
    let spec = SyntheticSpec {
        size: 16,
        train: 2,
        validation: 1,
        test: 1,
        ..Default::default()
    };
    let manifest = generate_synthetic(&spec, &dir)?;
    let ds = load_dataset(&manifest)?;
    let header = read_volume(dir.join("train_000_image.vol"))?.header();
    println!("{}", toml::to_string(&header).unwrap_or_default());
    for s in ds.train.iter().chain(&ds.validation).chain(&ds.test) {
        println!("{}: {:?} voxels per class", s.name, s.labels.histogram());
    }
    let n = ds.train.len() + ds.validation.len() + ds.test.len();
    std::fs::remove_dir_all(&dir).ok();
    Ok(n)
}

fn main() -> Result<()> {
    run_example().map(|_| ())
}

//! Receptive fields of the residual paths, checked against a gradient probe
//! on a small network.

use highres3d::analysis::{numeric_rf_probe, receptive_field_of_path, rf_histogram, PathSubset};
use highres3d::network::{ArchConfig, ArchitectureSpec, Variant};
use highres3d::Result;

pub fn run_example() -> Result<(usize, usize, u64)> {
    let spec = ArchitectureSpec::highres3dnet(&ArchConfig::new(Variant::Default, 160))?;
    let blocks = spec.residual_block_count();
    let full = receptive_field_of_path(&spec, PathSubset::all(blocks))?;
    let empty = receptive_field_of_path(&spec, PathSubset::empty())?;
    println!("{blocks} residual blocks, full path {full}^3, all skips {empty}^3");
    let hist = rf_histogram(&spec)?;
    let paths: u64 = hist.values().sum();
    println!("extent  paths");
    for (extent, count) in &hist {
        println!("{extent:>6}  {count}");
    }

    // A one-block-per-stage network is small enough to probe numerically.
    let mut small = ArchConfig::new(Variant::Nores, 2).with_widths([2, 2, 2]);
    small.blocks_per_stage = 1;
    let small = ArchitectureSpec::highres3dnet(&small)?;
    let analytic = receptive_field_of_path(&small, PathSubset::empty())?;
    let probed = numeric_rf_probe(&small)?;
    println!("small network: analytic {analytic}, probed {probed}");
    Ok((full, empty, paths))
}

fn main() -> Result<()> {
    run_example().map(|_| ())
}

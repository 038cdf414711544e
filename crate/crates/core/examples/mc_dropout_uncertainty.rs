//! Monte Carlo dropout: majority-vote labels, a disagreement map, and voxel
//! accuracy as uncertain voxels are excluded.

use highres3d::infer::{accuracy_vs_uncertainty, mc_sample_predict, preprocess, samples_vs_dcs, PaddingPolicy};
use highres3d::io::{synthesize, SyntheticSpec};
use highres3d::network::{build, ArchConfig, Variant};
use highres3d::train::{train, AugmentationConfig, TrainConfig, TrainOutputs};
use highres3d::{Result, Rng};

pub fn run_example(iterations: usize) -> Result<f32> {
    let ds = synthesize(&SyntheticSpec {
        size: 20,
        train: 1,
        test: 1,
        ..Default::default()
    })?;
    let arch = ArchConfig::new(Variant::Dropout, 3).with_widths([4, 8, 8]).with_dropout_width(16);
    let (spec, store) = build::<f32>(&arch, &mut Rng::new(2))?;
    let config = TrainConfig {
        subvolume: 16,
        iterations,
        val_every: iterations,
        seed: 2,
        augmentation: AugmentationConfig::disabled(),
        ..Default::default()
    };
    let store = train(&spec, store, &ds, &config, &TrainOutputs::default())?.store;
    let test = &ds.test[0];
    let policy = PaddingPolicy::default();
    let map = mc_sample_predict(&spec, &store, &preprocess(&test.image)?, &policy, 10, 0)?;
    let max = map.disagreement.data().iter().copied().fold(0.0f32, f32::max);
    let uncertain = map.disagreement.data().iter().filter(|&&d| d > 0.0).count();
    println!("{} samples, {uncertain} voxels with disagreement, max {max:.2}", map.samples);
    for p in accuracy_vs_uncertainty(&map, &test.labels, &[0.05, 0.2, 0.4, 1.0])? {
        println!(
            "disagreement < {:.2}: accuracy {:?}, {:.1}% of voxels",
            p.threshold,
            p.accuracy.map(|a| (a * 1e4).round() / 1e4),
            100.0 * p.retained_fraction
        );
    }
    for (m, dcs) in samples_vs_dcs(&spec, &store, &ds.test, &[1, 5, 10], &policy, 0)? {
        println!("M = {m:>2}: majority-vote DCS {dcs:.4}");
    }
    Ok(max)
}

fn main() -> Result<()> {
    let iterations = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(150);
    run_example(iterations).map(|_| ())
}

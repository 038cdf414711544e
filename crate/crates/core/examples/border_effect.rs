//! DCS as a function of how many border voxels are left out of the score.

use highres3d::analysis::{border_effect_curve, detect_plateau};
use highres3d::infer::PaddingPolicy;
use highres3d::io::{synthesize, SyntheticSpec};
use highres3d::network::{build, ArchConfig, Variant};
use highres3d::train::{train, AugmentationConfig, TrainConfig, TrainOutputs};
use highres3d::{Result, Rng};

pub fn run_example(iterations: usize) -> Result<Vec<(usize, f64)>> {
    let ds = synthesize(&SyntheticSpec {
        size: 24,
        train: 1,
        test: 2,
        ..Default::default()
    })?;
    let (spec, store) = build::<f32>(&ArchConfig::new(Variant::Default, 3).with_widths([4, 8, 8]), &mut Rng::new(3))?;
    let config = TrainConfig {
        subvolume: 16,
        iterations,
        val_every: iterations,
        seed: 3,
        augmentation: AugmentationConfig::disabled(),
        ..Default::default()
    };
    let store = train(&spec, store, &ds, &config, &TrainOutputs::default())?.store;
    let mut curve = Vec::new();
    for pad in [0, 16] {
        let points = border_effect_curve(&spec, &store, &ds.test, &[0, 1, 2, 4, 6, 8], &PaddingPolicy::new(pad))?;
        println!("input padding {pad}:");
        for p in &points {
            println!("  border {:>2}: DCS {:.4} ± {:.4} over {} voxels", p.border, p.mean_dcs, p.std_err, p.voxels);
        }
        println!("  plateau from border {:?}", detect_plateau(&points, 0.01));
        if pad == 16 {
            curve = points.iter().map(|p| (p.border, p.mean_dcs)).collect();
        }
    }
    Ok(curve)
}

fn main() -> Result<()> {
    let iterations = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(150);
    run_example(iterations).map(|_| ())
}

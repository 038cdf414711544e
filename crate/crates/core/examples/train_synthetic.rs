//! Trains a narrow network on synthetic nested shapes and reports per-class
//! DCS on a held-out volume.
//!
//! ```text
//! cargo run --release --example train_synthetic -- 300
//! ```

use highres3d::infer::{predict, preprocess, PaddingPolicy};
use highres3d::io::{synthesize, SyntheticSpec};
use highres3d::loss::{dcs_metric, mean_dcs};
use highres3d::network::{build, ArchConfig, Variant};
use highres3d::train::{train, AugmentationConfig, TrainConfig, TrainOutputs};
use highres3d::{Result, Rng};

pub fn run_example(iterations: usize) -> Result<f64> {
    let ds = synthesize(&SyntheticSpec {
        size: 24,
        train: 2,
        test: 1,
        ..Default::default()
    })?;
    let (spec, store) = build::<f32>(&ArchConfig::new(Variant::Default, 3).with_widths([4, 8, 8]), &mut Rng::new(1))?;
    let config = TrainConfig {
        subvolume: 16,
        iterations,
        val_every: iterations.div_ceil(4),
        seed: 1,
        augmentation: AugmentationConfig::disabled(),
        ..Default::default()
    };
    let outcome = train(&spec, store, &ds, &config, &TrainOutputs::default())?;
    for row in outcome.metrics.iter().filter(|r| r.val_mean_dcs.is_some()) {
        println!("step {:>4}  loss {:.4}  train DCS {:.4}", row.step, row.loss, row.val_mean_dcs.unwrap());
    }
    let test = &ds.test[0];
    let (pred, _) = predict(&spec, &outcome.store, &preprocess(&test.image)?, &PaddingPolicy::default())?;
    for c in 0..3 {
        println!("class {c}: test DCS {:.4}", dcs_metric(&pred, &test.labels, c)?);
    }
    let dcs = mean_dcs(&pred, &test.labels)?;
    println!("mean test DCS {dcs:.4}");
    Ok(dcs)
}

fn main() -> Result<()> {
    let iterations = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(200);
    run_example(iterations).map(|_| ())
}

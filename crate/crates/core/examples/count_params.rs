//! Parameter totals of the three architecture variants.
//!
//! ```text
//! cargo run --example count_params
//! ```

use highres3d::network::{build, count_conv_parameters, count_parameters, ArchConfig, Variant};
use highres3d::{Result, Rng};

pub fn run_example() -> Result<Vec<(Variant, usize)>> {
    let mut totals = Vec::new();
    for variant in [Variant::Default, Variant::Dropout, Variant::Nores] {
        let (spec, store) = build::<f32>(&ArchConfig::new(variant, 160), &mut Rng::new(0))?;
        let total = count_parameters(&store);
        println!(
            "{variant:?}: {total} parameters ({:.2}M), {} in convolutions, {} conv layers",
            total as f64 / 1e6,
            count_conv_parameters(&store),
            spec.conv_layers().count()
        );
        totals.push((variant, total));
    }
    Ok(totals)
}

fn main() -> Result<()> {
    run_example().map(|_| ())
}

//! HighRes3DNet: architecture description, parameters, forward passes and
//! checkpoints.

pub mod arch;
pub mod checkpoint;
pub mod forward;
pub mod params;

pub use arch::{ArchConfig, ArchitectureSpec, LayerKind, LayerSpec, Variant};
pub use forward::{forward, forward_graph, forward_layers, Mode};
pub use params::{count_conv_parameters, count_parameters, init_parameters, ParamRole, ParameterStore};

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Scalar;

/// Builds the layer list for `variant` with the default widths and draws
/// initial parameters.
pub fn build_highres3dnet<S: Scalar>(
    variant: Variant,
    num_classes: usize,
    rng: &mut Rng,
) -> Result<(ArchitectureSpec, ParameterStore<S>)> {
    build(&ArchConfig::new(variant, num_classes), rng)
}

pub fn build<S: Scalar>(config: &ArchConfig, rng: &mut Rng) -> Result<(ArchitectureSpec, ParameterStore<S>)> {
    let spec = ArchitectureSpec::highres3dnet(config)?;
    let store = init_parameters(&spec, rng)?;
    Ok((spec, store))
}

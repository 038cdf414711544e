use std::ops::Range;

use crate::error::{Error, Result};
use crate::graph::{add_channel_padded, Graph, Var};
use crate::network::arch::{ArchitectureSpec, LayerKind};
use crate::network::params::{ParamRole, ParameterStore};
use crate::ops::batchnorm::{batchnorm_inference, batchnorm_train};
use crate::ops::conv::{conv3d_forward, ConvAlgo, ConvKernel, Padding};
use crate::ops::{softmax_channels, BatchNormMode, DropoutMask};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Batch statistics, dropout sampled.
    Train,
    /// Running statistics, dropout off.
    Inference,
    /// Running statistics, dropout sampled.
    McSample,
}

impl Mode {
    fn bn(self) -> BatchNormMode {
        match self {
            Mode::Train => BatchNormMode::Train,
            Mode::Inference | Mode::McSample => BatchNormMode::Inference,
        }
    }

    fn samples_dropout(self) -> bool {
        !matches!(self, Mode::Inference)
    }
}

fn check_input<S: Scalar>(spec: &ArchitectureSpec, input: &Tensor<S>) -> Result<()> {
    input.spatial()?;
    if input.channels() != spec.in_channels() {
        return Err(Error::ShapeMismatch {
            op: "network input",
            left: input.dims().to_vec(),
            right: vec![spec.in_channels()],
        });
    }
    Ok(())
}

/// Class scores `(num_classes, D, H, W)` for a `(C_in, D, H, W)` input with
/// same-padded convolutions throughout.
///
/// Train mode here normalises with batch statistics but leaves the store's
/// running statistics untouched; [`forward_graph`] updates them.
pub fn forward<S: Scalar>(
    spec: &ArchitectureSpec,
    store: &ParameterStore<S>,
    input: &Tensor<S>,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Tensor<S>> {
    check_input(spec, input)?;
    forward_layers(spec, store, input.clone(), 0..spec.layers().len(), mode, rng, ConvAlgo::Gemm)
}

/// Runs `layers` of `spec` on `x`. The range must not split a residual block.
pub fn forward_layers<S: Scalar>(
    spec: &ArchitectureSpec,
    store: &ParameterStore<S>,
    mut x: Tensor<S>,
    layers: Range<usize>,
    mode: Mode,
    rng: &mut Rng,
    algo: ConvAlgo,
) -> Result<Tensor<S>> {
    let mut skip: Option<Tensor<S>> = None;
    for layer in &spec.layers()[layers] {
        x = match &layer.kind {
            LayerKind::Conv { dilation, .. } => {
                let w = store.require(&layer.name, ParamRole::ConvWeight)?;
                let kernel = ConvKernel::new(w.clone(), *dilation)?;
                conv3d_forward(&x, &kernel, Padding::Same, algo)?
            }
            LayerKind::BatchNorm { .. } => {
                let mut state = store.bn_state(&layer.name)?;
                match mode.bn() {
                    BatchNormMode::Train => batchnorm_train(&x, &mut state)?.0,
                    BatchNormMode::Inference => batchnorm_inference(&x, &state)?,
                }
            }
            LayerKind::Relu => x.relu(),
            LayerKind::Dropout { keep } => {
                if mode.samples_dropout() {
                    DropoutMask::sample(*keep, x.dims(), rng)?.apply(&x)?
                } else {
                    x
                }
            }
            LayerKind::Softmax => softmax_channels(&x)?,
            LayerKind::ResidualBegin => {
                skip = Some(x.clone());
                x
            }
            LayerKind::ResidualEnd => {
                let s = skip
                    .take()
                    .ok_or_else(|| Error::invalid("layer range splits a residual block"))?;
                add_channel_padded(&x, &s)?
            }
        };
    }
    if skip.is_some() {
        return Err(Error::invalid("layer range splits a residual block"));
    }
    Ok(x)
}

/// Records the forward pass on `graph` and returns the score node. Every
/// trainable tensor enters as a parameter leaf keyed by its store slot; in
/// train mode the store's running statistics are updated.
pub fn forward_graph<S: Scalar>(
    spec: &ArchitectureSpec,
    store: &mut ParameterStore<S>,
    graph: &mut Graph<S>,
    input: Var,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    check_input(spec, graph.value(input))?;
    let mut x = input;
    let mut skip: Option<Var> = None;
    let param = |graph: &mut Graph<S>, store: &ParameterStore<S>, layer: &str, role: ParamRole| -> Result<Var> {
        let slot = store
            .slot(layer, role)
            .ok_or_else(|| Error::ArchitectureMismatch(format!("missing {layer} parameter")))?;
        Ok(graph.param(slot, store.trainable(slot).clone()))
    };
    for layer in spec.layers() {
        x = match &layer.kind {
            LayerKind::Conv { dilation, .. } => {
                let w = param(graph, store, &layer.name, ParamRole::ConvWeight)?;
                graph.conv(x, w, *dilation, Padding::Same)?
            }
            LayerKind::BatchNorm { .. } => {
                let gamma = param(graph, store, &layer.name, ParamRole::Gamma)?;
                let beta = param(graph, store, &layer.name, ParamRole::Beta)?;
                let mut state = store.bn_state(&layer.name)?;
                let out = graph.batchnorm(x, gamma, beta, &mut state, mode.bn())?;
                if mode == Mode::Train {
                    store.set_running_stats(&layer.name, &state)?;
                }
                out
            }
            LayerKind::Relu => graph.relu(x),
            LayerKind::Dropout { keep } => {
                if mode.samples_dropout() {
                    graph.dropout(x, *keep, rng)?
                } else {
                    x
                }
            }
            LayerKind::Softmax => graph.softmax(x)?,
            LayerKind::ResidualBegin => {
                skip = Some(x);
                x
            }
            LayerKind::ResidualEnd => {
                let s = skip.take().expect("validated spec");
                graph.add_residual(s, x)?
            }
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::arch::{ArchConfig, LayerSpec, Variant};
    use crate::network::params::init_parameters;
    use crate::tensor::Distribution;

    fn narrow(variant: Variant, classes: usize) -> ArchitectureSpec {
        ArchitectureSpec::highres3dnet(&ArchConfig::new(variant, classes).with_widths([2, 3, 4]).with_dropout_width(5))
            .unwrap()
    }

    fn volume(rng: &mut Rng, n: usize) -> Tensor<f32> {
        Tensor::random_fill(rng, Distribution::Normal { mean: 0.0, std: 1.0 }, vec![1, n, n, n]).unwrap()
    }

    #[test]
    fn output_shape_and_score_simplex() {
        let spec = narrow(Variant::Default, 5);
        let mut rng = Rng::new(0);
        let store = init_parameters::<f32>(&spec, &mut rng).unwrap();
        let x = volume(&mut rng, 9);
        let y = forward(&spec, &store, &x, Mode::Inference, &mut rng).unwrap();
        assert_eq!(y.dims(), &[5, 9, 9, 9]);
        let n = 729;
        for i in 0..n {
            let s: f32 = (0..5).map(|c| y.data()[c * n + i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn inference_deterministic_mc_sample_stochastic() {
        let spec = narrow(Variant::Dropout, 3);
        let mut rng = Rng::new(1);
        let store = init_parameters::<f32>(&spec, &mut rng).unwrap();
        let x = volume(&mut rng, 6);
        let a = forward(&spec, &store, &x, Mode::Inference, &mut Rng::new(1)).unwrap();
        let b = forward(&spec, &store, &x, Mode::Inference, &mut Rng::new(2)).unwrap();
        assert_eq!(a, b);
        let c = forward(&spec, &store, &x, Mode::McSample, &mut Rng::new(1)).unwrap();
        let d = forward(&spec, &store, &x, Mode::McSample, &mut Rng::new(2)).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn eager_and_graph_paths_agree_bitwise() {
        let spec = narrow(Variant::Dropout, 3);
        let mut rng = Rng::new(2);
        let mut store = init_parameters::<f32>(&spec, &mut rng).unwrap();
        let x = volume(&mut rng, 7);
        for mode in [Mode::Train, Mode::Inference, Mode::McSample] {
            let eager = forward(&spec, &store, &x, mode, &mut Rng::new(9)).unwrap();
            let mut g = Graph::default();
            let xi = g.input(x.clone());
            let out = forward_graph(&spec, &mut store, &mut g, xi, mode, &mut Rng::new(9)).unwrap();
            assert_eq!(g.value(out), &eager, "{mode:?}");
        }
    }

    #[test]
    fn spatial_resolution_preserved_per_layer() {
        let spec = narrow(Variant::Default, 2);
        let mut rng = Rng::new(3);
        let store = init_parameters::<f32>(&spec, &mut rng).unwrap();
        let x = Tensor::random_fill(&mut rng, Distribution::Normal { mean: 0.0, std: 1.0 }, vec![1, 5, 7, 6]).unwrap();
        let mut h = x.clone();
        let layers = spec.layers();
        let mut i = 0;
        while i < layers.len() {
            // Step over whole residual blocks.
            let mut j = i + 1;
            if layers[i].kind == LayerKind::ResidualBegin {
                j = i + layers[i..].iter().position(|l| l.kind == LayerKind::ResidualEnd).unwrap() + 1;
            }
            h = forward_layers(&spec, &store, h, i..j, Mode::Inference, &mut rng, ConvAlgo::Gemm).unwrap();
            assert_eq!(h.spatial().unwrap(), [5, 7, 6]);
            i = j;
        }
        assert!(forward_layers(&spec, &store, x, 3..5, Mode::Inference, &mut rng, ConvAlgo::Gemm).is_err());
    }

    #[test]
    fn zero_residual_branches_pass_features_through() {
        // With F-path conv weights zero, every block is the identity and the
        // classifier sees the (normalised, rectified) first-layer features.
        let spec = narrow(Variant::Default, 3);
        let mut rng = Rng::new(4);
        let mut store = init_parameters::<f64>(&spec, &mut rng).unwrap();
        let names: Vec<String> = spec
            .conv_layers()
            .map(|c| c.0.to_string())
            .filter(|n| n.starts_with('s'))
            .collect();
        for n in &names {
            store.get_mut(n, ParamRole::ConvWeight).unwrap().data_mut().fill(0.0);
        }
        let x: Tensor<f64> = volume(&mut rng, 6).cast();
        let layers = spec.layers();
        let first_block = layers.iter().position(|l| l.kind == LayerKind::ResidualBegin).unwrap();
        let last_end = layers.iter().rposition(|l| l.kind == LayerKind::ResidualEnd).unwrap();
        let stem = forward_layers(&spec, &store, x, 0..first_block, Mode::Inference, &mut rng, ConvAlgo::Gemm).unwrap();
        let body = forward_layers(&spec, &store, stem.clone(), first_block..last_end + 1, Mode::Inference, &mut rng, ConvAlgo::Gemm)
            .unwrap();
        let padded = add_channel_padded(&Tensor::zeros(body.dims().to_vec()).unwrap(), &stem).unwrap();
        assert_eq!(body, padded);
    }

    #[test]
    fn input_channel_mismatch_rejected() {
        let spec = ArchitectureSpec::new(
            2,
            2,
            vec![LayerSpec::conv("c", 1, 1, 2, 2), LayerSpec::softmax("s")],
        )
        .unwrap();
        let store = init_parameters::<f32>(&spec, &mut Rng::new(0)).unwrap();
        let x = Tensor::<f32>::zeros(vec![1, 3, 3, 3]).unwrap();
        assert!(forward(&spec, &store, &x, Mode::Inference, &mut Rng::new(0)).is_err());
    }
}

//! Whole-volume prediction and Monte Carlo dropout uncertainty.

use serde::{Deserialize, Serialize};

use crate::dataset::Subject;
use crate::error::{Error, Result};
use crate::loss::{mean_dcs, LabelVolume};
use crate::network::{forward, forward_layers, ArchitectureSpec, Mode, ParameterStore};
use crate::ops::ConvAlgo;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{standardize_intensity, StandardizeMode};

/// Zero border added before the forward pass and removed from its output;
/// optionally, large volumes are processed in cubic tiles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaddingPolicy {
    pub pad: usize,
    pub fill: f32,
    /// Output tile side; each tile is computed with a context margin of the
    /// network's receptive radius so that tiles match the untiled result.
    pub tile: Option<usize>,
}

impl Default for PaddingPolicy {
    fn default() -> Self {
        PaddingPolicy {
            pad: 16,
            fill: 0.0,
            tile: None,
        }
    }
}

impl PaddingPolicy {
    pub fn new(pad: usize) -> Self {
        PaddingPolicy {
            pad,
            ..Default::default()
        }
    }

    pub fn with_tile(mut self, tile: usize) -> Self {
        self.tile = Some(tile);
        self
    }
}

/// Test-time intensity standardisation of a raw image.
pub fn preprocess(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    standardize_intensity(image, StandardizeMode::Test, &mut Rng::new(0))
}

fn tiled_scores(
    spec: &ArchitectureSpec,
    store: &ParameterStore<f32>,
    padded: &Tensor<f32>,
    tile: usize,
) -> Result<Tensor<f32>> {
    if tile == 0 {
        return Err(Error::invalid("tile size must be positive"));
    }
    let dims = padded.spatial()?;
    let margin = spec.receptive_radius();
    let classes = spec.num_classes();
    let n: usize = dims.iter().product();
    let mut out = vec![0.0f32; classes * n];
    let starts = |len: usize| (0..len).step_by(tile).collect::<Vec<_>>();
    let mut rng = Rng::new(0);
    for &z0 in &starts(dims[0]) {
        for &y0 in &starts(dims[1]) {
            for &x0 in &starts(dims[2]) {
                let o = [z0, y0, x0];
                let size = [0, 1, 2].map(|a| tile.min(dims[a] - o[a]));
                // Context window clipped to the volume so that its own zero
                // padding coincides with the untiled pass.
                let lo = [0, 1, 2].map(|a| o[a].saturating_sub(margin));
                let hi = [0, 1, 2].map(|a| (o[a] + size[a] + margin).min(dims[a]));
                let win = padded.crop(lo, [0, 1, 2].map(|a| hi[a] - lo[a]))?;
                let s = forward(spec, store, &win, Mode::Inference, &mut rng)?;
                let inner = s.crop([0, 1, 2].map(|a| o[a] - lo[a]), size)?;
                let d = inner.data();
                for c in 0..classes {
                    for z in 0..size[0] {
                        for y in 0..size[1] {
                            let src = ((c * size[0] + z) * size[1] + y) * size[2];
                            let dst = ((c * dims[0] + o[0] + z) * dims[1] + o[1] + y) * dims[2] + o[2];
                            out[dst..dst + size[2]].copy_from_slice(&d[src..src + size[2]]);
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![classes, dims[0], dims[1], dims[2]], out)
}

/// Labels and softmax scores for a preprocessed `(C_in, D, H, W)` image,
/// both at the input's spatial size.
pub fn predict(
    spec: &ArchitectureSpec,
    store: &ParameterStore<f32>,
    image: &Tensor<f32>,
    policy: &PaddingPolicy,
) -> Result<(LabelVolume, Tensor<f32>)> {
    store.check_against(spec)?;
    let dims = image.spatial()?;
    let padded = image.pad(policy.pad, policy.fill)?;
    let pdims = padded.spatial()?;
    let scores = match policy.tile {
        Some(t) if pdims.iter().any(|&d| d > t) => tiled_scores(spec, store, &padded, t)?,
        _ => forward(spec, store, &padded, Mode::Inference, &mut Rng::new(0))?,
    };
    let scores = scores.crop([policy.pad; 3], dims)?;
    Ok((LabelVolume::argmax(&scores)?, scores))
}

/// Majority labels of `M` dropout samples and the per-voxel fraction of
/// samples that disagree with them.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    pub labels: LabelVolume,
    /// `(1, D, H, W)` values in `[0, 1 - 1/M]`.
    pub disagreement: Tensor<f32>,
    pub samples: usize,
}

/// Per-voxel majority vote; ties go to the lowest class id.
pub fn fuse_votes(samples: &[LabelVolume]) -> Result<UncertaintyMap> {
    let first = samples.first().ok_or_else(|| Error::invalid("at least one sample required"))?;
    let (dims, classes) = (first.dims(), first.num_classes());
    if samples.iter().any(|s| s.dims() != dims || s.num_classes() != classes) {
        return Err(Error::invalid("samples differ in shape or class count"));
    }
    let m = samples.len();
    let mut counts = vec![0u32; classes];
    let mut labels = Vec::with_capacity(first.len());
    let mut disagreement = Vec::with_capacity(first.len());
    for i in 0..first.len() {
        counts.fill(0);
        for s in samples {
            counts[s.labels()[i] as usize] += 1;
        }
        let mut best = 0;
        for c in 1..classes {
            if counts[c] > counts[best] {
                best = c;
            }
        }
        labels.push(best as u16);
        disagreement.push((m - counts[best] as usize) as f32 / m as f32);
    }
    Ok(UncertaintyMap {
        labels: LabelVolume::new(dims, classes, labels)?,
        disagreement: Tensor::from_vec(vec![1, dims[0], dims[1], dims[2]], disagreement)?,
        samples: m,
    })
}

/// Label volumes of `m` dropout samples; sample `i` uses the stream
/// `Rng::new(seed).derive(i)`. With `reuse`, the layers below the dropout
/// layer run once and only the head is resampled.
pub fn mc_sample_labels(
    spec: &ArchitectureSpec,
    store: &ParameterStore<f32>,
    image: &Tensor<f32>,
    policy: &PaddingPolicy,
    m: usize,
    seed: u64,
    reuse: bool,
) -> Result<Vec<LabelVolume>> {
    if m < 1 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let drop = spec
        .dropout_index()
        .ok_or_else(|| Error::ArchitectureMismatch("checkpoint has no dropout layer".into()))?;
    store.check_against(spec)?;
    let dims = image.spatial()?;
    let padded = image.pad(policy.pad, policy.fill)?;
    let root = Rng::new(seed);
    let n_layers = spec.layers().len();
    let shared = if reuse {
        let mut unused = Rng::new(0);
        Some(forward_layers(spec, store, padded.clone(), 0..drop, Mode::Inference, &mut unused, ConvAlgo::Gemm)?)
    } else {
        None
    };
    (0..m)
        .map(|i| {
            let mut rng = root.derive(i as u64);
            let scores = match &shared {
                Some(f) => forward_layers(spec, store, f.clone(), drop..n_layers, Mode::McSample, &mut rng, ConvAlgo::Gemm)?,
                None => forward(spec, store, &padded, Mode::McSample, &mut rng)?,
            };
            LabelVolume::argmax(&scores.crop([policy.pad; 3], dims)?)
        })
        .collect()
}

pub fn mc_sample_predict(
    spec: &ArchitectureSpec,
    store: &ParameterStore<f32>,
    image: &Tensor<f32>,
    policy: &PaddingPolicy,
    m: usize,
    seed: u64,
) -> Result<UncertaintyMap> {
    fuse_votes(&mc_sample_labels(spec, store, image, policy, m, seed, true)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPoint {
    pub threshold: f64,
    /// `None` when no voxel falls below the threshold.
    pub accuracy: Option<f64>,
    pub retained_fraction: f64,
}

/// Voxel accuracy restricted to voxels whose disagreement is below each
/// threshold.
pub fn accuracy_vs_uncertainty(
    map: &UncertaintyMap,
    truth: &LabelVolume,
    thresholds: &[f64],
) -> Result<Vec<AccuracyPoint>> {
    if map.labels.dims() != truth.dims() {
        return Err(Error::ShapeMismatch {
            op: "accuracy vs uncertainty",
            left: map.labels.dims().to_vec(),
            right: truth.dims().to_vec(),
        });
    }
    let n = truth.len();
    Ok(thresholds
        .iter()
        .map(|&t| {
            let (mut kept, mut correct) = (0usize, 0usize);
            for i in 0..n {
                if (map.disagreement.data()[i] as f64) < t {
                    kept += 1;
                    correct += (map.labels.labels()[i] == truth.labels()[i]) as usize;
                }
            }
            AccuracyPoint {
                threshold: t,
                accuracy: (kept > 0).then(|| correct as f64 / kept as f64),
                retained_fraction: kept as f64 / n as f64,
            }
        })
        .collect())
}

/// Mean DCS of the majority vote over the first `M` samples for each `M` in
/// `counts`. Samples are drawn once per subject and shared across counts.
pub fn samples_vs_dcs(
    spec: &ArchitectureSpec,
    store: &ParameterStore<f32>,
    subjects: &[Subject],
    counts: &[usize],
    policy: &PaddingPolicy,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    if subjects.is_empty() {
        return Err(Error::Dataset("no volumes".into()));
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let mut totals = vec![0.0; counts.len()];
    for s in subjects {
        let image = preprocess(&s.image)?;
        let samples = mc_sample_labels(spec, store, &image, policy, max, seed, true)?;
        for (t, &m) in totals.iter_mut().zip(counts) {
            *t += mean_dcs(&fuse_votes(&samples[..m])?.labels, &s.labels)?;
        }
    }
    Ok(counts
        .iter()
        .zip(totals)
        .map(|(&m, t)| (m, t / subjects.len() as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_parameters, ArchConfig, Variant};
    use crate::tensor::Distribution;

    fn model(variant: Variant) -> (ArchitectureSpec, ParameterStore<f32>) {
        let spec = ArchitectureSpec::highres3dnet(&ArchConfig::new(variant, 3).with_widths([2, 3, 4]).with_dropout_width(6))
            .unwrap();
        let store = init_parameters(&spec, &mut Rng::new(11)).unwrap();
        (spec, store)
    }

    fn image(dims: [usize; 3]) -> Tensor<f32> {
        Tensor::random_fill(
            &mut Rng::new(3),
            Distribution::Normal { mean: 0.0, std: 1.0 },
            vec![1, dims[0], dims[1], dims[2]],
        )
        .unwrap()
    }

    fn lv(labels: Vec<u16>) -> LabelVolume {
        LabelVolume::new([1, 1, labels.len()], 4, labels).unwrap()
    }

    #[test]
    fn output_shape_equals_input_for_each_pad() {
        let (spec, store) = model(Variant::Default);
        let img = image([5, 6, 7]);
        for pad in [0, 8, 16] {
            let (l, s) = predict(&spec, &store, &img, &PaddingPolicy::new(pad)).unwrap();
            assert_eq!(l.dims(), [5, 6, 7]);
            assert_eq!(s.dims(), &[3, 5, 6, 7]);
        }
    }

    #[test]
    fn centre_independent_of_pad_depth() {
        let mut cfg = ArchConfig::new(Variant::Default, 3).with_widths([2, 3, 4]);
        cfg.blocks_per_stage = 1;
        let spec = ArchitectureSpec::highres3dnet(&cfg).unwrap();
        let mut store = init_parameters(&spec, &mut Rng::new(12)).unwrap();
        for e in store.entries_mut() {
            if e.role == crate::network::ParamRole::RunningMean {
                e.tensor = e.tensor.map(|_| 0.3);
            }
        }
        assert!(spec.receptive_radius() + 17 <= 16 + 17);
        let img = image([36, 36, 36]);
        let (_, s16) = predict(&spec, &store, &img, &PaddingPolicy::new(16)).unwrap();
        let (_, s24) = predict(&spec, &store, &img, &PaddingPolicy::new(24)).unwrap();
        let a = s16.crop([17; 3], [2; 3]).unwrap();
        let b = s24.crop([17; 3], [2; 3]).unwrap();
        assert_eq!(a, b);
        let (_, s0) = predict(&spec, &store, &img, &PaddingPolicy::new(0)).unwrap();
        assert_ne!(s0.crop([0; 3], [2; 3]).unwrap(), s16.crop([0; 3], [2; 3]).unwrap());
    }

    #[test]
    fn tiled_prediction_matches_whole_volume() {
        let (spec, store) = model(Variant::Default);
        let img = image([9, 10, 11]);
        let policy = PaddingPolicy::new(2);
        let (l0, s0) = predict(&spec, &store, &img, &policy).unwrap();
        let (l1, s1) = predict(&spec, &store, &img, &policy.with_tile(6)).unwrap();
        assert!(s0.max_abs_diff(&s1).unwrap() < 1e-5);
        assert_eq!(l0, l1);
    }

    #[test]
    fn vote_fusion_examples() {
        let mut samples = vec![lv(vec![2, 1]); 6];
        samples.extend(vec![lv(vec![3, 1]); 4]);
        let map = fuse_votes(&samples).unwrap();
        assert_eq!(map.labels.labels(), &[2, 1]);
        assert!((map.disagreement.data()[0] - 0.4).abs() < 1e-7);
        assert_eq!(map.disagreement.data()[1], 0.0);
        let tie = fuse_votes(&[lv(vec![3]), lv(vec![1])]).unwrap();
        assert_eq!(tie.labels.labels(), &[1]);
        let one = fuse_votes(&[lv(vec![0, 3])]).unwrap();
        assert!(one.disagreement.data().iter().all(|&u| u == 0.0));
        assert!(fuse_votes(&[]).is_err());
    }

    #[test]
    fn feature_reuse_matches_naive_sampling() {
        let (spec, store) = model(Variant::Dropout);
        let img = image([6, 6, 6]);
        let policy = PaddingPolicy::new(2);
        let fast = mc_sample_labels(&spec, &store, &img, &policy, 4, 7, true).unwrap();
        let naive = mc_sample_labels(&spec, &store, &img, &policy, 4, 7, false).unwrap();
        assert_eq!(fast, naive);
    }

    #[test]
    fn mc_requires_dropout_and_positive_count() {
        let (spec, store) = model(Variant::Default);
        let img = image([4, 4, 4]);
        assert!(mc_sample_predict(&spec, &store, &img, &PaddingPolicy::new(0), 3, 0).is_err());
        let (spec, store) = model(Variant::Dropout);
        assert!(mc_sample_predict(&spec, &store, &img, &PaddingPolicy::new(0), 0, 0).is_err());
    }

    #[test]
    fn accuracy_curve_edge_cases() {
        let map = fuse_votes(&[lv(vec![0, 1, 2, 3]), lv(vec![0, 1, 2, 0])]).unwrap();
        let truth = lv(vec![0, 1, 0, 0]);
        let pts = accuracy_vs_uncertainty(&map, &truth, &[1e-6, 1.0]).unwrap();
        // Voxel 3 is a 1–1 tie resolved to class 0 with disagreement 0.5.
        assert_eq!(pts[0].accuracy, Some(2.0 / 3.0));
        assert_eq!(pts[1].accuracy, Some(3.0 / 4.0));
        assert_eq!(pts[1].retained_fraction, 1.0);
        let all_unsure = fuse_votes(&[lv(vec![1]), lv(vec![2])]).unwrap();
        let p = accuracy_vs_uncertainty(&all_unsure, &lv(vec![1]), &[0.1]).unwrap();
        assert_eq!(p[0].accuracy, None);
    }
}

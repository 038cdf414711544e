//! Receptive fields of the residual paths and the border-effect harness.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Subject;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::infer::{predict, preprocess, PaddingPolicy};
use crate::loss::mean_dcs;
use crate::network::{forward_graph, ArchitectureSpec, LayerKind, Mode, ParamRole, ParameterStore};
use crate::ops::ConvAlgo;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Residual blocks taken through their convolutional branch: bit `i` set
/// means block `i` (in layer order) contributes its convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PathSubset(pub u64);

impl PathSubset {
    pub fn all(blocks: usize) -> Self {
        PathSubset(if blocks == 64 { u64::MAX } else { (1u64 << blocks) - 1 })
    }

    pub fn empty() -> Self {
        PathSubset(0)
    }

    pub fn complement(self, blocks: usize) -> Self {
        PathSubset(!self.0 & Self::all(blocks).0)
    }

    pub fn contains(self, block: usize) -> bool {
        self.0 >> block & 1 == 1
    }
}

/// Side length of the receptive field of one path: `1 + Σ 2·(k/2)·r` over
/// the convolutions on it. Convolutions outside residual blocks are always
/// on the path.
pub fn receptive_field_of_path(spec: &ArchitectureSpec, subset: PathSubset) -> Result<usize> {
    let blocks = spec.residual_block_count();
    if blocks < 64 && subset.0 >> blocks != 0 {
        return Err(Error::invalid(format!("path mask {:#b} wider than {blocks} blocks", subset.0)));
    }
    let mut extent = 1;
    let mut block: Option<usize> = None;
    let mut seen = 0;
    for l in spec.layers() {
        match l.kind {
            LayerKind::ResidualBegin => {
                block = Some(seen);
                seen += 1;
            }
            LayerKind::ResidualEnd => block = None,
            LayerKind::Conv { extent: k, dilation, .. } if block.is_none_or(|b| subset.contains(b)) => {
                extent += 2 * (k / 2) * dilation;
            }
            _ => {}
        }
    }
    Ok(extent)
}

pub const MAX_ENUMERATED_BLOCKS: usize = 24;

/// Number of paths per receptive-field side length, over all `2^n` subsets.
pub fn rf_histogram(spec: &ArchitectureSpec) -> Result<BTreeMap<usize, u64>> {
    let n = spec.residual_block_count();
    if n > MAX_ENUMERATED_BLOCKS {
        return Err(Error::invalid(format!(
            "{n} residual blocks exceed the enumeration limit of {MAX_ENUMERATED_BLOCKS}"
        )));
    }
    // Each block adds a fixed amount when taken, so evaluate per-block
    // contributions once and sum over masks.
    let base = receptive_field_of_path(spec, PathSubset::empty())?;
    let gains: Vec<usize> = (0..n)
        .map(|b| receptive_field_of_path(spec, PathSubset(1 << b)).map(|e| e - base))
        .collect::<Result<_>>()?;
    let mut hist = BTreeMap::new();
    for mask in 0u64..(1u64 << n) {
        let e = base + (0..n).filter(|&b| mask >> b & 1 == 1).map(|b| gains[b]).sum::<usize>();
        *hist.entry(e).or_insert(0) += 1;
    }
    Ok(hist)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfRow {
    pub extent: usize,
    pub count: u64,
}

pub fn rf_rows(hist: &BTreeMap<usize, u64>) -> Vec<RfRow> {
    hist.iter().map(|(&extent, &count)| RfRow { extent, count }).collect()
}

/// Positive-weight copy of a model for gradient probing: every convolution
/// weight is `1/fan_in` except class 0 of the final convolution, which gets
/// `2/fan_in` so the class-0 score gradient keeps one sign; batch norm is
/// the identity up to epsilon.
fn probe_store(spec: &ArchitectureSpec) -> Result<ParameterStore<f64>> {
    let mut store = crate::network::init_parameters::<f64>(spec, &mut Rng::new(0))?;
    let last_conv = spec.conv_layers().last().map(|c| c.0.to_string());
    for (name, k, _, c_in, c_out) in spec.conv_layers() {
        let fan = (k * k * k * c_in) as f64;
        let w = store.get_mut(name, ParamRole::ConvWeight).expect("initialised");
        let per_out = w.numel() / c_out;
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            let boost = if Some(name) == last_conv.as_deref() && i / per_out == 0 { 2.0 } else { 1.0 };
            *v = boost / fan;
        }
    }
    Ok(store)
}

/// Side length of the input region with non-zero gradient of the class-0
/// score at the centre output voxel, for a positive-weight copy of `spec`
/// in inference mode on a positive input. Equals the full-path receptive
/// field because no gradient can cancel.
pub fn numeric_rf_probe(spec: &ArchitectureSpec) -> Result<usize> {
    let radius = spec.receptive_radius();
    let n = 2 * radius + 3;
    let c = n / 2;
    let mut store = probe_store(spec)?;
    let mut g = Graph::<f64>::new(ConvAlgo::Gemm);
    let x = g.leaf(Tensor::full(vec![spec.in_channels(), n, n, n], 1.0)?);
    let scores = forward_graph(spec, &mut store, &mut g, x, Mode::Inference, &mut Rng::new(0))?;
    let mut mask = Tensor::zeros(vec![spec.num_classes(), n, n, n])?;
    mask.data_mut()[(c * n + c) * n + c] = 1.0;
    let m = g.input(mask);
    let picked = g.mul(scores, m)?;
    let loss = g.sum(picked);
    let grads = g.backward(loss)?;
    let gx = grads.wrt(x).ok_or_else(|| Error::invalid("input received no gradient"))?;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for ch in 0..spec.in_channels() {
        for z in 0..n {
            for y in 0..n {
                for xx in 0..n {
                    if gx.data()[((ch * n + z) * n + y) * n + xx] != 0.0 {
                        for (a, v) in [z, y, xx].into_iter().enumerate() {
                            lo[a] = lo[a].min(v);
                            hi[a] = hi[a].max(v);
                        }
                    }
                }
            }
        }
    }
    if lo[0] == usize::MAX {
        return Ok(0);
    }
    Ok((0..3).map(|a| hi[a] - lo[a] + 1).max().unwrap())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BorderPoint {
    pub border: usize,
    pub mean_dcs: f64,
    pub std_err: f64,
    /// Voxels per volume inside the evaluated region.
    pub voxels: usize,
}

/// Mean DCS (and its standard error across subjects) restricted to the
/// centred region left after discarding `b` voxels from every face.
pub fn border_effect_curve(
    spec: &ArchitectureSpec,
    store: &ParameterStore<f32>,
    subjects: &[Subject],
    borders: &[usize],
    policy: &PaddingPolicy,
) -> Result<Vec<BorderPoint>> {
    if subjects.is_empty() {
        return Err(Error::Dataset("no volumes".into()));
    }
    let max_b = borders.iter().copied().max().unwrap_or(0);
    for s in subjects {
        if s.dims().iter().any(|&d| d <= 2 * max_b) {
            return Err(Error::invalid(format!(
                "border {max_b} leaves no interior in {} {:?}",
                s.name,
                s.dims()
            )));
        }
    }
    let mut per_border = vec![Vec::with_capacity(subjects.len()); borders.len()];
    for s in subjects {
        let (pred, _) = predict(spec, store, &preprocess(&s.image)?, policy)?;
        let d = s.dims();
        for (i, &b) in borders.iter().enumerate() {
            let size = d.map(|v| v - 2 * b);
            per_border[i].push(mean_dcs(&pred.crop([b; 3], size)?, &s.labels.crop([b; 3], size)?)?);
        }
    }
    let voxels = |b: usize| subjects[0].dims().iter().map(|&v| v - 2 * b).product();
    Ok(borders
        .iter()
        .zip(per_border)
        .map(|(&b, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std_err = if v.len() > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
            } else {
                0.0
            };
            BorderPoint {
                border: b,
                mean_dcs: mean,
                std_err,
                voxels: voxels(b),
            }
        })
        .collect())
}

/// Smallest border from which every later point of the curve stays within
/// `tolerance` of its value. Points must be sorted by border.
pub fn detect_plateau(curve: &[BorderPoint], tolerance: f64) -> Option<usize> {
    (0..curve.len())
        .find(|&i| curve[i..].iter().all(|p| (p.mean_dcs - curve[i].mean_dcs).abs() <= tolerance))
        .map(|i| curve[i].border)
}

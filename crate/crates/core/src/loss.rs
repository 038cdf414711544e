//! Segmentation losses and the hard Dice metric.
//!
//! Soft Dice per class is `2 Σ δ F / (Σ δ² + Σ F²)` with the squared
//! denominator terms kept exactly; the loss is one minus the mean over the
//! active classes.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Dense class ids over a `(D, H, W)` grid, stored 0-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: [usize; 3],
    num_classes: usize,
    labels: Vec<u16>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], num_classes: usize, labels: Vec<u16>) -> Result<Self> {
        if dims.iter().product::<usize>() != labels.len() || dims.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "label volume",
                left: dims.to_vec(),
                right: vec![labels.len()],
            });
        }
        if num_classes < 1 || num_classes > u16::MAX as usize + 1 {
            return Err(Error::invalid(format!("class count {num_classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::invalid(format!("label {bad} >= class count {num_classes}")));
        }
        Ok(LabelVolume {
            dims,
            num_classes,
            labels,
        })
    }

    pub fn filled(dims: [usize; 3], num_classes: usize, label: u16) -> Result<Self> {
        Self::new(dims, num_classes, vec![label; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u16 {
        self.labels[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Classes with at least one voxel.
    pub fn present_classes(&self) -> Vec<usize> {
        self.histogram()
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(c, _)| c)
            .collect()
    }

    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if origin[a] + size[a] > self.dims[a] {
                return Err(Error::invalid(format!(
                    "crop {origin:?}+{size:?} exceeds labels {:?}",
                    self.dims
                )));
            }
        }
        let mut out = Vec::with_capacity(size.iter().product());
        for z in 0..size[0] {
            for y in 0..size[1] {
                let s = ((origin[0] + z) * self.dims[1] + origin[1] + y) * self.dims[2] + origin[2];
                out.extend_from_slice(&self.labels[s..s + size[2]]);
            }
        }
        LabelVolume::new(size, self.num_classes, out)
    }

    /// Per-voxel argmax over the channel axis of `(C, D, H, W)` scores; ties
    /// go to the lowest class id.
    pub fn argmax<S: Scalar>(scores: &Tensor<S>) -> Result<Self> {
        let [d, h, w] = scores.spatial()?;
        let c = scores.channels();
        let n = d * h * w;
        let s = scores.data();
        let mut labels = vec![0u16; n];
        for (i, l) in labels.iter_mut().enumerate() {
            let mut best = s[i];
            for ch in 1..c {
                if s[ch * n + i] > best {
                    best = s[ch * n + i];
                    *l = ch as u16;
                }
            }
        }
        LabelVolume::new([d, h, w], c, labels)
    }

    /// One-hot `(C, D, H, W)` encoding.
    pub fn one_hot<S: Scalar>(&self) -> Tensor<S> {
        let n = self.labels.len();
        let mut data = vec![S::zero(); self.num_classes * n];
        for (i, &l) in self.labels.iter().enumerate() {
            data[l as usize * n + i] = S::one();
        }
        let [d, h, w] = self.dims;
        Tensor::from_vec(vec![self.num_classes, d, h, w], data).expect("consistent dims")
    }
}

/// Softmax scores `(C, D, H, W)`: entries in `[0, 1]`, channels summing to
/// one at every voxel (within `1e-5`).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVolume<S = f32>(Tensor<S>);

impl<S: Scalar> ScoreVolume<S> {
    pub fn new(scores: Tensor<S>) -> Result<Self> {
        let [d, h, w] = scores.spatial()?;
        let c = scores.channels();
        let n = d * h * w;
        let s = scores.data();
        let tol = S::from_f64_lossy(1e-5);
        for i in 0..n {
            let mut sum = S::zero();
            for ch in 0..c {
                let v = s[ch * n + i];
                if !(v >= S::zero() && v <= S::one()) {
                    return Err(Error::invalid(format!("score {v:?} outside [0, 1]")));
                }
                sum = sum + v;
            }
            if (sum - S::one()).abs() > tol {
                return Err(Error::invalid(format!("scores at voxel {i} sum to {sum:?}")));
            }
        }
        Ok(ScoreVolume(scores))
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.0
    }
}

fn check_pair<S: Scalar>(scores: &Tensor<S>, truth: &LabelVolume) -> Result<(usize, usize)> {
    let spatial = scores.spatial()?;
    if spatial != truth.dims() || scores.channels() != truth.num_classes() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            left: scores.dims().to_vec(),
            right: vec![truth.num_classes(), truth.dims[0], truth.dims[1], truth.dims[2]],
        });
    }
    Ok((scores.channels(), truth.len()))
}

pub const LOG_FLOOR: f64 = 1e-12;

/// Mean voxel cross-entropy with `log` clamped at [`LOG_FLOOR`]. Returns the
/// loss and its gradient with respect to the scores.
pub fn cross_entropy<S: Scalar>(scores: &Tensor<S>, truth: &LabelVolume) -> Result<(S, Tensor<S>)> {
    let (_, n) = check_pair(scores, truth)?;
    let floor = S::from_f64_lossy(LOG_FLOOR);
    let nf = S::from_usize(n).unwrap();
    let s = scores.data();
    let mut grad = vec![S::zero(); s.len()];
    let mut total = S::zero();
    for (i, &l) in truth.labels.iter().enumerate() {
        let j = l as usize * n + i;
        let p = s[j];
        if p > floor {
            total = total - p.ln();
            grad[j] = -S::one() / (p * nf);
        } else {
            total = total - floor.ln();
        }
    }
    let loss = total / nf;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy".into()));
    }
    Ok((loss, Tensor::from_vec(scores.dims().to_vec(), grad)?))
}

/// Which classes enter the mean of the soft Dice loss.
#[derive(Clone, Copy, Debug, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DiceClasses {
    /// Classes present in the ground truth; others are left out of the mean.
    #[default]
    PresentInTruth,
    /// Every class, with `epsilon` added to numerator and denominator.
    AllSmoothed { epsilon: f64 },
}

/// `1 - mean_c D_c` and its gradient with respect to the scores.
pub fn dice_loss<S: Scalar>(
    scores: &Tensor<S>,
    truth: &LabelVolume,
    classes: DiceClasses,
) -> Result<(S, Tensor<S>)> {
    let (c, n) = check_pair(scores, truth)?;
    let hist = truth.histogram();
    let (active, eps): (Vec<usize>, S) = match classes {
        DiceClasses::PresentInTruth => ((0..c).filter(|&k| hist[k] > 0).collect(), S::zero()),
        DiceClasses::AllSmoothed { epsilon } => ((0..c).collect(), S::from_f64_lossy(epsilon)),
    };
    let s = scores.data();
    let mut grad = vec![S::zero(); s.len()];
    let m = S::from_usize(active.len()).unwrap();
    let two = S::from_f64_lossy(2.0);
    let mut dice_sum = S::zero();
    for &k in &active {
        let sk = &s[k * n..(k + 1) * n];
        let mut inter = S::zero();
        let mut sq = S::zero();
        for (i, &l) in truth.labels.iter().enumerate() {
            if l as usize == k {
                inter = inter + sk[i];
            }
            sq = sq + sk[i] * sk[i];
        }
        let t = S::from_usize(hist[k]).unwrap();
        let num = two * inter + eps;
        let den = t + sq + eps;
        dice_sum = dice_sum + num / den;
        // d(num/den)/dF_i = (2 δ_i den - num 2 F_i) / den²; the loss takes -1/m.
        let g = &mut grad[k * n..(k + 1) * n];
        let den2 = den * den;
        for (i, &l) in truth.labels.iter().enumerate() {
            let delta = if l as usize == k { S::one() } else { S::zero() };
            g[i] = -(two * delta * den - num * two * sk[i]) / (den2 * m);
        }
    }
    let loss = S::one() - dice_sum / m;
    if !loss.is_finite() {
        return Err(Error::NonFinite("dice_loss".into()));
    }
    Ok((loss, Tensor::from_vec(scores.dims().to_vec(), grad)?))
}

/// Hard Dice `2|P ∩ T| / (|P| + |T|)` for one class; 1 when the class is
/// absent from both.
pub fn dcs_metric(pred: &LabelVolume, truth: &LabelVolume, class: usize) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::ShapeMismatch {
            op: "dcs",
            left: pred.dims().to_vec(),
            right: truth.dims().to_vec(),
        });
    }
    let (mut p, mut t, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels.iter().zip(&truth.labels) {
        let (ia, ib) = (a as usize == class, b as usize == class);
        p += ia as usize;
        t += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + t) as f64)
}

/// Mean hard Dice over the classes present in `truth`.
pub fn mean_dcs(pred: &LabelVolume, truth: &LabelVolume) -> Result<f64> {
    let present = truth.present_classes();
    let mut total = 0.0;
    for &c in &present {
        total += dcs_metric(pred, truth, c)?;
    }
    Ok(total / present.len() as f64)
}

/// Fraction of voxels whose labels agree.
pub fn voxel_accuracy(pred: &LabelVolume, truth: &LabelVolume) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            left: pred.dims().to_vec(),
            right: truth.dims().to_vec(),
        });
    }
    let hits = pred.labels.iter().zip(&truth.labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::softmax_channels;
    use crate::rng::Rng;
    use crate::tensor::Distribution;

    fn random_labels(rng: &mut Rng, dims: [usize; 3], c: usize) -> LabelVolume {
        let n = dims.iter().product();
        LabelVolume::new(dims, c, (0..n).map(|_| rng.below(c) as u16).collect()).unwrap()
    }

    fn random_scores(rng: &mut Rng, c: usize, dims: [usize; 3]) -> Tensor<f64> {
        let logits = Tensor::<f64>::random_fill(
            rng,
            Distribution::Normal { mean: 0.0, std: 1.5 },
            vec![c, dims[0], dims[1], dims[2]],
        )
        .unwrap();
        softmax_channels(&logits).unwrap()
    }

    /// Plain-loop soft Dice with the squared denominator.
    fn dice_oracle(scores: &Tensor<f64>, truth: &LabelVolume) -> f64 {
        let [d, h, w] = truth.dims();
        let present = truth.present_classes();
        let mut total = 0.0;
        for &c in &present {
            let (mut num, mut den_t, mut den_f) = (0.0, 0.0, 0.0);
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let delta = if truth.get(z, y, x) as usize == c { 1.0 } else { 0.0 };
                        let f = scores.get(&[c, z, y, x]).unwrap();
                        num += delta * f;
                        den_t += delta * delta;
                        den_f += f * f;
                    }
                }
            }
            total += 2.0 * num / (den_t + den_f);
        }
        total / present.len() as f64
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let truth = LabelVolume::new([1, 1, 3], 4, vec![0, 3, 2]).unwrap();
        let perfect = truth.one_hot::<f64>();
        let (l, _) = cross_entropy(&perfect, &truth).unwrap();
        assert_eq!(l, 0.0);
        let uniform = Tensor::<f64>::full(vec![4, 1, 1, 3], 0.25).unwrap();
        let (l, _) = cross_entropy(&uniform, &truth).unwrap();
        assert!((l - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let truth = LabelVolume::new([2, 2, 2], 2, vec![0, 1, 1, 0, 0, 0, 1, 0]).unwrap();
        let (l, _) = dice_loss(&truth.one_hot::<f64>(), &truth, DiceClasses::PresentInTruth).unwrap();
        assert_eq!(l, 0.0);
        let flipped = LabelVolume::new([2, 2, 2], 2, truth.labels().iter().map(|&l| 1 - l).collect()).unwrap();
        let (l, _) = dice_loss(&flipped.one_hot::<f64>(), &truth, DiceClasses::PresentInTruth).unwrap();
        assert_eq!(l, 1.0);
    }

    #[test]
    fn dice_matches_loop_oracle() {
        let mut rng = Rng::new(21);
        for _ in 0..5 {
            let truth = random_labels(&mut rng, [4, 4, 4], 2);
            let scores = random_scores(&mut rng, 2, [4, 4, 4]);
            let (l, _) = dice_loss(&scores, &truth, DiceClasses::PresentInTruth).unwrap();
            assert!(((1.0 - l) - dice_oracle(&scores, &truth)).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = Rng::new(5);
        let truth = random_labels(&mut rng, [3, 2, 3], 3);
        let scores = random_scores(&mut rng, 3, [3, 2, 3]);
        type LossFn = fn(&Tensor<f64>, &LabelVolume) -> f64;
        let losses: [(LossFn, f64); 2] = [
            (|s, t| cross_entropy(s, t).unwrap().0, 1e-6),
            (|s, t| dice_loss(s, t, DiceClasses::PresentInTruth).unwrap().0, 1e-5),
        ];
        for (i, (f, tol)) in losses.into_iter().enumerate() {
            let grad = if i == 0 {
                cross_entropy(&scores, &truth).unwrap().1
            } else {
                dice_loss(&scores, &truth, DiceClasses::PresentInTruth).unwrap().1
            };
            let h = 1e-6;
            for j in 0..scores.numel() {
                let mut p = scores.clone();
                p.data_mut()[j] += h;
                let mut m = scores.clone();
                m.data_mut()[j] -= h;
                let fd = (f(&p, &truth) - f(&m, &truth)) / (2.0 * h);
                let an = grad.data()[j];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel <= tol, "loss {i} elem {j}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn dcs_closed_forms() {
        let t = LabelVolume::new([1, 1, 16], 2, [vec![1u16; 8], vec![0; 8]].concat()).unwrap();
        assert_eq!(dcs_metric(&t, &t, 1).unwrap(), 1.0);
        let disjoint = LabelVolume::new([1, 1, 16], 2, [vec![0u16; 8], vec![1; 8]].concat()).unwrap();
        assert_eq!(dcs_metric(&disjoint, &t, 1).unwrap(), 0.0);
        let half = LabelVolume::new([1, 1, 16], 2, [vec![0u16; 4], vec![1; 8], vec![0; 4]].concat()).unwrap();
        assert_eq!(dcs_metric(&half, &t, 1).unwrap(), 0.5);
    }

    #[test]
    fn one_hot_soft_dice_equals_hard_dcs_on_all_2cube_volumes() {
        for t_bits in 0u32..256 {
            let truth = LabelVolume::new([2, 2, 2], 2, (0..8).map(|i| ((t_bits >> i) & 1) as u16).collect()).unwrap();
            for p_bits in 0u32..256 {
                let pred =
                    LabelVolume::new([2, 2, 2], 2, (0..8).map(|i| ((p_bits >> i) & 1) as u16).collect()).unwrap();
                let (l, _) = dice_loss(&pred.one_hot::<f64>(), &truth, DiceClasses::PresentInTruth).unwrap();
                let hard = mean_dcs(&pred, &truth).unwrap();
                assert!(((1.0 - l) - hard).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn excluded_classes_get_zero_gradient() {
        let mut rng = Rng::new(2);
        let truth = LabelVolume::new([2, 2, 2], 3, vec![0, 1, 0, 1, 1, 0, 0, 1]).unwrap();
        let scores = random_scores(&mut rng, 3, [2, 2, 2]);
        let (_, g) = dice_loss(&scores, &truth, DiceClasses::PresentInTruth).unwrap();
        assert!(g.data()[16..24].iter().all(|&v| v == 0.0));
        let (_, g) = dice_loss(&scores, &truth, DiceClasses::AllSmoothed { epsilon: 1e-5 }).unwrap();
        assert!(g.data()[16..24].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn shape_mismatch_is_error() {
        let truth = LabelVolume::filled([2, 2, 2], 2, 0).unwrap();
        let s = Tensor::<f64>::full(vec![2, 2, 2, 3], 0.5).unwrap();
        assert!(cross_entropy(&s, &truth).is_err());
        assert!(dice_loss(&s, &truth, DiceClasses::PresentInTruth).is_err());
    }

    proptest::proptest! {
        #[test]
        fn losses_are_bounded_and_permutation_equivariant(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let truth = random_labels(&mut rng, [2, 3, 2], 3);
            let scores = random_scores(&mut rng, 3, [2, 3, 2]);
            let (d, _) = dice_loss(&scores, &truth, DiceClasses::PresentInTruth).unwrap();
            let (x, _) = cross_entropy(&scores, &truth).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&d));
            proptest::prop_assert!(x >= 0.0);
            // Relabel with the cycle c -> c+1 and rotate score channels to match.
            let perm = |c: usize| (c + 1) % 3;
            let truth_p = LabelVolume::new(truth.dims(), 3, truth.labels().iter().map(|&l| perm(l as usize) as u16).collect()).unwrap();
            let n = truth.len();
            let mut sp = vec![0.0; scores.numel()];
            for c in 0..3 {
                sp[perm(c) * n..(perm(c) + 1) * n].copy_from_slice(&scores.data()[c * n..(c + 1) * n]);
            }
            let scores_p = Tensor::from_vec(scores.dims().to_vec(), sp).unwrap();
            let (dp, _) = dice_loss(&scores_p, &truth_p, DiceClasses::PresentInTruth).unwrap();
            let (xp, _) = cross_entropy(&scores_p, &truth_p).unwrap();
            proptest::prop_assert!((d - dp).abs() < 1e-12);
            proptest::prop_assert!((x - xp).abs() < 1e-12);
        }
    }
}

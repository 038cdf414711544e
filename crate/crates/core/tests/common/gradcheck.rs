//! Finite-difference checks of every differentiable op and of a small
//! network, returned as `(name, max relative error, tolerance)`.

use super::{grad_check, micro_spec, random, rel_err, FD_STEP};
use highres3d::graph::{Graph, Var};
use highres3d::loss::{DiceClasses, LabelVolume};
use highres3d::network::{forward_graph, init_parameters, Mode, ParameterStore};
use highres3d::ops::{BatchNormMode, BatchNormState, ConvAlgo, DropoutMask, Padding};
use highres3d::{Result, Rng, Tensor};

pub const TOL: f64 = 1e-5;
pub const TOL_BN: f64 = 1e-4;

pub type Check = (String, f64, f64);

/// `sum(x * r)` for a fixed random `r`, so every output element gets a
/// distinct weight.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let r = random(&mut Rng::new(seed), g.value(x).dims());
    let r = g.input(r);
    let p = g.mul(x, r)?;
    Ok(g.sum(p))
}

pub fn labels(dims: [usize; 3], classes: usize, seed: u64) -> LabelVolume {
    let mut rng = Rng::new(seed);
    let n = dims.iter().product();
    LabelVolume::new(dims, classes, (0..n).map(|_| rng.below(classes) as u16).collect()).unwrap()
}

/// Moves entries away from the ReLU kink.
fn off_kink(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v })
}

pub fn conv_checks() -> Vec<Check> {
    let mut rng = Rng::new(1);
    let mut out = Vec::new();
    for (k, r, padding) in [
        (3, 1, Padding::Same),
        (3, 2, Padding::Same),
        (3, 4, Padding::Same),
        (3, 2, Padding::Valid),
        (1, 1, Padding::Same),
    ] {
        let size = if padding == Padding::Valid { 7 } else { 5 };
        let x = random(&mut rng, &[2, size, size, size]);
        let w = random(&mut rng, &[3, 2, k, k, k]);
        let err = grad_check(&[x, w], |g, v| {
            let y = g.conv(v[0], v[1], r, padding)?;
            project(g, y, 9)
        });
        out.push((format!("conv k={k} r={r} {padding:?}"), err, TOL));
    }
    out
}

pub fn batchnorm_checks() -> Vec<Check> {
    let mut rng = Rng::new(2);
    let x = random(&mut rng, &[3, 3, 3, 2]);
    let gamma = random(&mut rng, &[3]);
    let beta = random(&mut rng, &[3]);
    [BatchNormMode::Train, BatchNormMode::Inference]
        .into_iter()
        .map(|mode| {
            let err = grad_check(&[x.clone(), gamma.clone(), beta.clone()], |g, v| {
                let mut state = BatchNormState::new(3)?;
                state.running_mean = Tensor::from_vec(vec![3], vec![0.3, -0.2, 0.1])?;
                state.running_var = Tensor::from_vec(vec![3], vec![0.5, 2.0, 1.5])?;
                let y = g.batchnorm(v[0], v[1], v[2], &mut state, mode)?;
                project(g, y, 10)
            });
            (format!("batchnorm {mode:?}"), err, TOL_BN)
        })
        .collect()
}

pub fn elementwise_checks() -> Vec<Check> {
    let mut rng = Rng::new(3);
    let a = off_kink(random(&mut rng, &[2, 3, 3, 3]));
    let b = random(&mut rng, &[2, 3, 3, 3]);
    let wide = random(&mut rng, &[4, 3, 3, 3]);
    let mask = DropoutMask::sample(0.5, a.dims(), &mut Rng::new(4)).unwrap();
    vec![
        (
            "relu".into(),
            grad_check(std::slice::from_ref(&a), |g, v| {
                let y = g.relu(v[0]);
                project(g, y, 11)
            }),
            TOL,
        ),
        (
            "add".into(),
            grad_check(&[a.clone(), b.clone()], |g, v| {
                let y = g.add(v[0], v[1])?;
                project(g, y, 12)
            }),
            TOL,
        ),
        (
            "mul".into(),
            grad_check(&[a.clone(), b.clone()], |g, v| {
                let y = g.mul(v[0], v[1])?;
                project(g, y, 13)
            }),
            TOL,
        ),
        (
            "channel-padded residual".into(),
            grad_check(&[a.clone(), wide], |g, v| {
                let y = g.add_residual(v[0], v[1])?;
                project(g, y, 14)
            }),
            TOL,
        ),
        (
            "softmax".into(),
            grad_check(std::slice::from_ref(&a), |g, v| {
                let y = g.softmax(v[0])?;
                project(g, y, 15)
            }),
            TOL,
        ),
        (
            "dropout".into(),
            grad_check(std::slice::from_ref(&a), |g, v| {
                let y = g.dropout_with_mask(v[0], mask.clone())?;
                project(g, y, 16)
            }),
            TOL,
        ),
    ]
}

pub fn loss_checks() -> Vec<Check> {
    let mut rng = Rng::new(5);
    let x = random(&mut rng, &[3, 3, 3, 3]);
    let truth = labels([3, 3, 3], 3, 6);
    let mut out = vec![(
        "cross entropy".to_string(),
        grad_check(std::slice::from_ref(&x), |g, v| {
            let s = g.softmax(v[0])?;
            g.cross_entropy(s, &truth)
        }),
        TOL,
    )];
    // Class 2 absent: exercises both class selections.
    let partial = LabelVolume::new([3, 3, 3], 3, truth.labels().iter().map(|&l| l.min(1)).collect()).unwrap();
    for classes in [DiceClasses::PresentInTruth, DiceClasses::AllSmoothed { epsilon: 1e-5 }] {
        for (name, t) in [("all present", &truth), ("one absent", &partial)] {
            let err = grad_check(std::slice::from_ref(&x), |g, v| {
                let s = g.softmax(v[0])?;
                g.dice_loss(s, t, classes)
            });
            out.push((format!("dice {classes:?} {name}"), err, TOL));
        }
    }
    out
}

fn micro_loss(store: &ParameterStore<f64>, input: &Tensor<f64>, truth: &LabelVolume) -> f64 {
    let spec = micro_spec(3);
    let mut store = store.clone();
    let mut g = Graph::new(ConvAlgo::Direct);
    let x = g.leaf(input.clone());
    let s = forward_graph(&spec, &mut store, &mut g, x, Mode::Train, &mut Rng::new(0)).unwrap();
    let l = g.dice_loss(s, truth, DiceClasses::PresentInTruth).unwrap();
    g.value(l).item()
}

/// Every trainable parameter and every input voxel of the two-block network
/// in train mode (batch statistics), under the Dice loss.
pub fn micro_network_check() -> Check {
    let spec = micro_spec(3);
    let mut rng = Rng::new(7);
    let mut store: ParameterStore<f64> = init_parameters(&spec, &mut rng).unwrap();
    for slot in 0..store.trainable_count() {
        let t = store.trainable(slot).clone();
        if t.dims().len() == 1 {
            *store.trainable_mut(slot) = random(&mut rng, t.dims()).map(|v| 1.0 + 0.3 * v);
        }
    }
    let input = random(&mut rng, &[1, 5, 5, 5]);
    let truth = labels([5, 5, 5], 3, 8);

    let mut g = Graph::new(ConvAlgo::Direct);
    let x = g.leaf(input.clone());
    let mut work = store.clone();
    let s = forward_graph(&spec, &mut work, &mut g, x, Mode::Train, &mut Rng::new(0)).unwrap();
    let l = g.dice_loss(s, &truth, DiceClasses::PresentInTruth).unwrap();
    let grads = g.backward(l).unwrap();
    let param_grads = grads.param_grads(&store.trainable_shapes()).unwrap();

    let mut worst = 0.0f64;
    for (slot, analytic) in param_grads.iter().enumerate() {
        for i in 0..analytic.numel() {
            let mut p = store.clone();
            p.trainable_mut(slot).data_mut()[i] += FD_STEP;
            let up = micro_loss(&p, &input, &truth);
            p.trainable_mut(slot).data_mut()[i] -= 2.0 * FD_STEP;
            let down = micro_loss(&p, &input, &truth);
            worst = worst.max(rel_err(analytic.data()[i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    let gi = grads.wrt(x).unwrap();
    for i in 0..input.numel() {
        let mut xi = input.clone();
        xi.data_mut()[i] += FD_STEP;
        let up = micro_loss(&store, &xi, &truth);
        xi.data_mut()[i] -= 2.0 * FD_STEP;
        let down = micro_loss(&store, &xi, &truth);
        worst = worst.max(rel_err(gi.data()[i], (up - down) / (2.0 * FD_STEP)));
    }
    ("two-block network".into(), worst, TOL_BN)
}

pub fn all_checks() -> Vec<Check> {
    let mut out = conv_checks();
    out.extend(batchnorm_checks());
    out.extend(elementwise_checks());
    out.extend(loss_checks());
    out.push(micro_network_check());
    out
}

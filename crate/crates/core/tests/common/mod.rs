//! Helpers shared by the integration tests: finite-difference gradient
//! checks, a naive convolution oracle and small models.
#![allow(dead_code)]

pub mod gradcheck;

use std::io::Write;

use highres3d::graph::{Graph, Var};
use highres3d::network::{ArchitectureSpec, LayerSpec};
use highres3d::ops::{conv3d_forward, ConvAlgo, ConvKernel, Padding};
use highres3d::tensor::Distribution;
use highres3d::{Result, Rng, Tensor};

pub const FD_STEP: f64 = 1e-6;
/// Denominator floor of the relative error, so that components whose true
/// value is ~0 are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn random(rng: &mut Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::random_fill(rng, Distribution::Normal { mean: 0.0, std: 1.0 }, dims.to_vec()).unwrap()
}

/// Largest relative error between reverse-mode gradients of the scalar
/// returned by `build` and central differences, over every element of every
/// input.
pub fn grad_check<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new(ConvAlgo::Direct);
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).item()
    };
    let mut g = Graph::new(ConvAlgo::Direct);
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| inputs[k].zeros_like());
        for i in 0..inputs[k].numel() {
            let x0 = xs[k].data()[i];
            xs[k].data_mut()[i] = x0 + FD_STEP;
            let up = eval(&xs);
            xs[k].data_mut()[i] = x0 - FD_STEP;
            let down = eval(&xs);
            xs[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Dense same- or valid-padded correlation of `(C_in, D, H, W)` with a
/// `(C_out, C_in, k, k, k)` kernel after inserting `r - 1` zeros between
/// taps, written as plain loops.
pub fn naive_dilated_conv(input: &Tensor<f32>, weights: &Tensor<f32>, r: usize, same: bool) -> Tensor<f32> {
    let [ci, d, h, w] = [input.dims()[0], input.dims()[1], input.dims()[2], input.dims()[3]];
    let [co, _, k, _, _] = [
        weights.dims()[0],
        weights.dims()[1],
        weights.dims()[2],
        weights.dims()[3],
        weights.dims()[4],
    ];
    let ke = (k - 1) * r + 1;
    let mut inflated = vec![0.0f64; co * ci * ke * ke * ke];
    for o in 0..co {
        for c in 0..ci {
            for a in 0..k {
                for b in 0..k {
                    for e in 0..k {
                        let v = weights.get(&[o, c, a, b, e]).unwrap() as f64;
                        inflated[(((o * ci + c) * ke + a * r) * ke + b * r) * ke + e * r] = v;
                    }
                }
            }
        }
    }
    let half = (ke - 1) / 2;
    let (od, oh, ow, shift) = if same {
        (d, h, w, 0isize)
    } else {
        (d - 2 * half, h - 2 * half, w - 2 * half, half as isize)
    };
    let mut out = vec![0.0f32; co * od * oh * ow];
    for o in 0..co {
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0f64;
                    for c in 0..ci {
                        for a in 0..ke {
                            for b in 0..ke {
                                for e in 0..ke {
                                    let iz = z as isize + shift + a as isize - half as isize;
                                    let iy = y as isize + shift + b as isize - half as isize;
                                    let ix = x as isize + shift + e as isize - half as isize;
                                    if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let wv = inflated[(((o * ci + c) * ke + a) * ke + b) * ke + e];
                                    let iv = input.get(&[c, iz as usize, iy as usize, ix as usize]).unwrap() as f64;
                                    acc += wv * iv;
                                }
                            }
                        }
                    }
                    out[((o * od + z) * oh + y) * ow + x] = acc as f32;
                }
            }
        }
    }
    Tensor::from_vec(vec![co, od, oh, ow], out).unwrap()
}

/// Random small geometry: returns the worst deviation of either algorithm.
pub fn random_conv_case(rng: &mut Rng) -> f64 {
    let r = [1, 2, 4][rng.below(3)];
    let k = if rng.below(5) == 0 { 1 } else { 3 };
    let same = rng.bernoulli(0.7);
    let reach = (k - 1) / 2 * r;
    let min = if same { 1 } else { 2 * reach + 1 };
    let dims: Vec<usize> = (0..3).map(|_| min + rng.below(5)).collect();
    let (ci, co) = (1 + rng.below(3), 1 + rng.below(3));
    let unif = Distribution::Uniform { low: -1.0, high: 1.0 };
    let x: Tensor<f32> = Tensor::random_fill(rng, unif, vec![ci, dims[0], dims[1], dims[2]]).unwrap();
    let w: Tensor<f32> = Tensor::random_fill(rng, unif, vec![co, ci, k, k, k]).unwrap();
    let oracle = naive_dilated_conv(&x, &w, r, same);
    let kernel = ConvKernel::new(w, r).unwrap();
    let padding = if same { Padding::Same } else { Padding::Valid };
    [ConvAlgo::Direct, ConvAlgo::Gemm]
        .into_iter()
        .map(|algo| {
            let y = conv3d_forward(&x, &kernel, padding, algo).unwrap();
            assert_eq!(y.dims(), oracle.dims());
            y.max_abs_diff(&oracle).unwrap()
        })
        .fold(0.0, f64::max)
}

/// conv, then two pre-activation residual blocks at dilations 1 and 2 (the
/// second widens 2 -> 3 channels), then a 1x1x1 classifier.
pub fn micro_spec(classes: usize) -> ArchitectureSpec {
    let mut layers = vec![
        LayerSpec::conv("conv0", 3, 1, 1, 2),
        LayerSpec::batchnorm("conv0_bn", 2),
        LayerSpec::relu("conv0_relu"),
    ];
    for (b, (r, cin, cout)) in [(1, 2, 2), (2, 2, 3)].into_iter().enumerate() {
        layers.extend([
            LayerSpec::residual_begin(format!("b{b}_begin")),
            LayerSpec::batchnorm(format!("b{b}_bn_a"), cin),
            LayerSpec::relu(format!("b{b}_relu_a")),
            LayerSpec::conv(format!("b{b}_conv_a"), 3, r, cin, cout),
            LayerSpec::batchnorm(format!("b{b}_bn_b"), cout),
            LayerSpec::relu(format!("b{b}_relu_b")),
            LayerSpec::conv(format!("b{b}_conv_b"), 3, r, cout, cout),
            LayerSpec::residual_end(format!("b{b}_end")),
        ]);
    }
    layers.extend([
        LayerSpec::batchnorm("head_bn", 3),
        LayerSpec::relu("head_relu"),
        LayerSpec::conv("classifier", 1, 1, 3, classes),
        LayerSpec::softmax("softmax"),
    ]);
    ArchitectureSpec::new(1, classes, layers).unwrap()
}

/// One line on the real standard output, bypassing the test harness's
/// capture so that it shows up in logs of a plain `cargo test`.
pub fn report(pass: bool, name: &str, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    let _ = out.flush();
}

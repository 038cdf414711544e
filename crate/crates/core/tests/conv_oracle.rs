//! Dilated convolution against a zero-inflated dense kernel.

mod common;

use common::random_conv_case;
use highres3d::ops::{conv3d_forward, ConvAlgo, ConvKernel, Padding};
use highres3d::{Rng, Tensor};

const CASES: usize = 120;
const TOL: f64 = 1e-5;

#[test]
fn random_cases_match_inflated_kernel() {
    let mut rng = Rng::new(2024);
    let worst = (0..CASES).map(|_| random_conv_case(&mut rng)).fold(0.0, f64::max);
    assert!(worst <= TOL, "max |diff| {worst:e}");
}

#[test]
fn single_tap_kernel_shifts() {
    // One non-zero tap at the +r corner of z picks out x[z + r].
    let r = 2;
    let x = Tensor::from_vec(vec![1, 5, 1, 1], vec![1.0f32, 2.0, 3.0, 4.0, 5.0]).unwrap();
    let mut w = Tensor::<f32>::zeros(vec![1, 1, 3, 3, 3]).unwrap();
    w.data_mut()[2 * 9 + 4] = 1.0;
    let y = conv3d_forward(&x, &ConvKernel::new(w, r).unwrap(), Padding::Same, ConvAlgo::Gemm).unwrap();
    assert_eq!(y.data(), &[3.0, 4.0, 5.0, 0.0, 0.0]);
}

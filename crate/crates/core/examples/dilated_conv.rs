//! A dilated 3x3x3 kernel sees the same taps as a zero-filled dense kernel,
//! and both loop orders agree.

use highres3d::ops::{conv3d_forward, ConvAlgo, ConvKernel, Padding};
use highres3d::tensor::Distribution;
use highres3d::{Result, Rng, Tensor};

pub fn run_example() -> Result<f64> {
    let mut rng = Rng::new(5);
    let unif = Distribution::Uniform { low: -1.0, high: 1.0 };
    let x: Tensor<f32> = Tensor::random_fill(&mut rng, unif, vec![2, 12, 12, 12])?;
    let w: Tensor<f32> = Tensor::random_fill(&mut rng, unif, vec![3, 2, 3, 3, 3])?;
    let mut worst = 0.0f64;
    for r in [1, 2, 4] {
        let kernel = ConvKernel::new(w.clone(), r)?;
        // Same dilation, dense form: taps at multiples of r, zeros between.
        let e = 2 * r + 1;
        let mut dense = Tensor::<f32>::zeros(vec![3, 2, e, e, e])?;
        for o in 0..3 {
            for c in 0..2 {
                for t in 0..27 {
                    let (a, b, d) = (t / 9, t / 3 % 3, t % 3);
                    let idx = (((o * 2 + c) * e + a * r) * e + b * r) * e + d * r;
                    dense.data_mut()[idx] = w.get(&[o, c, a, b, d]).unwrap();
                }
            }
        }
        let direct = conv3d_forward(&x, &kernel, Padding::Same, ConvAlgo::Direct)?;
        let gemm = conv3d_forward(&x, &kernel, Padding::Same, ConvAlgo::Gemm)?;
        let valid = conv3d_forward(&x, &kernel, Padding::Valid, ConvAlgo::Gemm)?;
        let d1 = direct.max_abs_diff(&gemm)?;
        // First valid-mode voxel by hand from the dense form.
        let z = r;
        let mut acc = 0.0f64;
        for c in 0..2 {
            for a in 0..e {
                for b in 0..e {
                    for d in 0..e {
                        let wv = dense.get(&[0, c, a, b, d]).unwrap() as f64;
                        acc += wv * x.get(&[c, z - r + a, z - r + b, z - r + d]).unwrap() as f64;
                    }
                }
            }
        }
        let d2 = (acc - valid.get(&[0, 0, 0, 0]).unwrap() as f64).abs();
        println!("r={r}: direct vs gemm {d1:.2e}, dense-kernel voxel {d2:.2e}, valid output {:?}", valid.dims());
        worst = worst.max(d1).max(d2);
    }
    Ok(worst)
}

fn main() -> Result<()> {
    run_example().map(|_| ())
}

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.relu()
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward<S: Scalar>(grad_out: &Tensor<S>, input: &Tensor<S>) -> Result<Tensor<S>> {
    grad_out.zip_map(input, "relu_backward", |g, x| if x > S::zero() { g } else { S::zero() })
}

/// Softmax across the leading (channel) axis at every voxel, with the
/// per-voxel maximum subtracted first.
pub fn softmax_channels<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let c = input.dims()[0];
    if c < 2 || input.shape().rank() < 2 {
        return Err(Error::invalid(format!(
            "softmax needs at least two channels, got shape {:?}",
            input.dims()
        )));
    }
    input.check_finite("softmax input")?;
    let n = input.numel() / c;
    let x = input.data();
    let mut out = vec![S::zero(); x.len()];
    let mut peak = vec![S::neg_infinity(); n];
    for ch in 0..c {
        for (p, &v) in peak.iter_mut().zip(&x[ch * n..(ch + 1) * n]) {
            if v > *p {
                *p = v;
            }
        }
    }
    let mut total = vec![S::zero(); n];
    for ch in 0..c {
        let (xs, os) = (&x[ch * n..(ch + 1) * n], &mut out[ch * n..(ch + 1) * n]);
        for i in 0..n {
            let e = (xs[i] - peak[i]).exp();
            os[i] = e;
            total[i] = total[i] + e;
        }
    }
    for ch in 0..c {
        for (o, &t) in out[ch * n..(ch + 1) * n].iter_mut().zip(&total) {
            *o = *o / t;
        }
    }
    Tensor::from_vec(input.dims().to_vec(), out)
}

/// `dx_c = s_c * (g_c - sum_k g_k s_k)` per voxel.
pub fn softmax_backward<S: Scalar>(grad_out: &Tensor<S>, output: &Tensor<S>) -> Result<Tensor<S>> {
    grad_out.expect_same_shape(output, "softmax_backward")?;
    let c = output.dims()[0];
    let n = output.numel() / c;
    let (g, s) = (grad_out.data(), output.data());
    let mut dot = vec![S::zero(); n];
    for ch in 0..c {
        let (gc, sc) = (&g[ch * n..(ch + 1) * n], &s[ch * n..(ch + 1) * n]);
        for ((d, &gv), &sv) in dot.iter_mut().zip(gc).zip(sc) {
            *d = *d + gv * sv;
        }
    }
    let mut dx = vec![S::zero(); g.len()];
    for ((dc, gc), sc) in dx.chunks_mut(n).zip(g.chunks(n)).zip(s.chunks(n)) {
        for i in 0..n {
            dc[i] = sc[i] * (gc[i] - dot[i]);
        }
    }
    Tensor::from_vec(output.dims().to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_uniform_scores() {
        let x = Tensor::<f64>::zeros(vec![4, 2, 2, 2]).unwrap();
        let s = softmax_channels(&x).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn closed_form_two_class() {
        let x = Tensor::from_vec(vec![2, 1], vec![0.0f64, 3.0f64.ln()]).unwrap();
        let s = softmax_channels(&x).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn shift_invariance_and_unit_sum() {
        let x = Tensor::from_vec(vec![3, 2], vec![0.5f64, -1.0, 2.0, 0.0, -0.3, 4.0]).unwrap();
        let shifted = x.map(|v| v + 1000.0);
        let a = softmax_channels(&x).unwrap();
        let b = softmax_channels(&shifted).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        for i in 0..2 {
            let sum: f64 = (0..3).map(|c| a.data()[c * 2 + i]).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!((0..3).all(|c| a.data()[c * 2 + i] > 0.0 && a.data()[c * 2 + i] < 1.0));
        }
    }

    #[test]
    fn single_channel_and_nonfinite_rejected() {
        assert!(softmax_channels(&Tensor::<f32>::zeros(vec![1, 4]).unwrap()).is_err());
        let bad = Tensor::from_vec(vec![2, 1], vec![f32::NAN, 0.0]).unwrap();
        assert!(softmax_channels(&bad).is_err());
    }

    #[test]
    fn relu_backward_masks_non_positive() {
        let x = Tensor::from_vec(vec![3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        let g = Tensor::from_vec(vec![3], vec![5.0f32, 5.0, 5.0]).unwrap();
        assert_eq!(relu_backward(&g, &x).unwrap().data(), &[0.0, 0.0, 5.0]);
    }
}

//! Per-channel batch normalisation over the spatial positions of one volume.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalise with statistics of the current input; update running stats.
    Train,
    /// Normalise with running statistics.
    Inference,
}

/// Scale/shift plus running statistics for one normalisation layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<S = f32> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl<S: Scalar> BatchNormState<S> {
    /// `gamma = 1`, `beta = 0`, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNormState {
            gamma: Tensor::full(vec![channels], S::one())?,
            beta: Tensor::zeros(vec![channels])?,
            running_mean: Tensor::zeros(vec![channels])?,
            running_var: Tensor::full(vec![channels], S::one())?,
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

/// Values kept for the backward pass of a train-mode normalisation.
#[derive(Clone, Debug)]
pub struct BatchNormSaved<S> {
    pub xhat: Tensor<S>,
    pub inv_std: Vec<S>,
}

fn check<S: Scalar>(input: &Tensor<S>, channels: usize) -> Result<(usize, usize)> {
    let dims = input.dims();
    if dims.len() < 2 {
        return Err(Error::InvalidShape {
            dims: dims.to_vec(),
            reason: "batchnorm needs (C, spatial...)",
        });
    }
    if dims[0] != channels {
        return Err(Error::ShapeMismatch {
            op: "batchnorm channels",
            left: dims.to_vec(),
            right: vec![channels],
        });
    }
    let n = input.numel() / channels;
    Ok((channels, n))
}

/// Train mode: normalise with per-channel mean and biased variance of
/// `input`, then `running = momentum * running + (1 - momentum) * batch`.
pub fn batchnorm_train<S: Scalar>(
    input: &Tensor<S>,
    state: &mut BatchNormState<S>,
) -> Result<(Tensor<S>, BatchNormSaved<S>)> {
    let (c, n) = check(input, state.channels())?;
    let eps = S::from_f64_lossy(state.epsilon);
    let mom = S::from_f64_lossy(state.momentum);
    let nf = S::from_usize(n).unwrap();
    let x = input.data();
    let mut out = vec![S::zero(); x.len()];
    let mut xhat = vec![S::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let xs = &x[ch * n..(ch + 1) * n];
        let mean = xs.iter().fold(S::zero(), |a, &v| a + v) / nf;
        let var = xs.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
        let is = S::one() / (var + eps).sqrt();
        let (g, b) = (state.gamma.data()[ch], state.beta.data()[ch]);
        for i in 0..n {
            let h = (xs[i] - mean) * is;
            xhat[ch * n + i] = h;
            out[ch * n + i] = g * h + b;
        }
        inv_std.push(is);
        let rm = &mut state.running_mean.data_mut()[ch];
        *rm = mom * *rm + (S::one() - mom) * mean;
        let rv = &mut state.running_var.data_mut()[ch];
        *rv = mom * *rv + (S::one() - mom) * var;
    }
    let out = Tensor::from_vec(input.dims().to_vec(), out)?;
    Ok((
        out,
        BatchNormSaved {
            xhat: Tensor::from_vec(input.dims().to_vec(), xhat)?,
            inv_std,
        },
    ))
}

/// Inference mode: affine map with the running statistics.
pub fn batchnorm_inference<S: Scalar>(input: &Tensor<S>, state: &BatchNormState<S>) -> Result<Tensor<S>> {
    let (c, n) = check(input, state.channels())?;
    let eps = S::from_f64_lossy(state.epsilon);
    let mut out = input.clone();
    for ch in 0..c {
        let is = S::one() / (state.running_var.data()[ch] + eps).sqrt();
        let scale = state.gamma.data()[ch] * is;
        let shift = state.beta.data()[ch] - state.running_mean.data()[ch] * scale;
        for v in &mut out.data_mut()[ch * n..(ch + 1) * n] {
            *v = *v * scale + shift;
        }
    }
    Ok(out)
}

pub fn batchnorm<S: Scalar>(
    input: &Tensor<S>,
    state: &mut BatchNormState<S>,
    mode: BatchNormMode,
) -> Result<Tensor<S>> {
    match mode {
        BatchNormMode::Train => batchnorm_train(input, state).map(|(o, _)| o),
        BatchNormMode::Inference => batchnorm_inference(input, state),
    }
}

/// Backward of [`batchnorm_train`]: returns `(d input, d gamma, d beta)`.
pub fn batchnorm_train_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    saved: &BatchNormSaved<S>,
    gamma: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    grad_out.expect_same_shape(&saved.xhat, "batchnorm_backward")?;
    let c = gamma.numel();
    let n = grad_out.numel() / c;
    let nf = S::from_usize(n).unwrap();
    let dy = grad_out.data();
    let xh = saved.xhat.data();
    let mut dx = vec![S::zero(); dy.len()];
    let mut dg = vec![S::zero(); c];
    let mut db = vec![S::zero(); c];
    for ch in 0..c {
        let r = ch * n..(ch + 1) * n;
        let (dys, xhs) = (&dy[r.clone()], &xh[r.clone()]);
        let sum_dy = dys.iter().fold(S::zero(), |a, &v| a + v);
        let sum_dy_xh = dys.iter().zip(xhs).fold(S::zero(), |a, (&d, &h)| a + d * h);
        dg[ch] = sum_dy_xh;
        db[ch] = sum_dy;
        let k = gamma.data()[ch] * saved.inv_std[ch] / nf;
        for i in 0..n {
            dx[ch * n + i] = k * (nf * dys[i] - sum_dy - xhs[i] * sum_dy_xh);
        }
    }
    Ok((
        Tensor::from_vec(grad_out.dims().to_vec(), dx)?,
        Tensor::from_vec(vec![c], dg)?,
        Tensor::from_vec(vec![c], db)?,
    ))
}

/// Backward of [`batchnorm_inference`]: returns `(d input, d gamma, d beta)`.
pub fn batchnorm_inference_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    input: &Tensor<S>,
    state: &BatchNormState<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (c, n) = check(input, state.channels())?;
    grad_out.expect_same_shape(input, "batchnorm_backward")?;
    let eps = S::from_f64_lossy(state.epsilon);
    let (dy, x) = (grad_out.data(), input.data());
    let mut dx = vec![S::zero(); dy.len()];
    let mut dg = vec![S::zero(); c];
    let mut db = vec![S::zero(); c];
    for ch in 0..c {
        let is = S::one() / (state.running_var.data()[ch] + eps).sqrt();
        let mean = state.running_mean.data()[ch];
        let scale = state.gamma.data()[ch] * is;
        for i in ch * n..(ch + 1) * n {
            dx[i] = dy[i] * scale;
            dg[ch] = dg[ch] + dy[i] * (x[i] - mean) * is;
            db[ch] = db[ch] + dy[i];
        }
    }
    Ok((
        Tensor::from_vec(grad_out.dims().to_vec(), dx)?,
        Tensor::from_vec(vec![c], dg)?,
        Tensor::from_vec(vec![c], db)?,
    ))
}
